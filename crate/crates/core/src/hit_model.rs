//! Hit records, detector configuration and raw-to-physical calibration.
//!
//! Times are carried as integer nanoseconds everywhere in the crate. Tick
//! durations are stored in femtoseconds so that the tick to nanosecond
//! conversion is exact integer arithmetic (a fine tick of 1.5625 ns is
//! 1_562_500 fs).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time in nanoseconds.
pub type Nanos = u64;

/// Default Timepix3 matrix edge length.
pub const MATRIX_SIZE: u16 = 256;

const FS_PER_NS: u128 = 1_000_000;

/// Energy in milli-keV. Quantized so hit records serialize bit-exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Energy(pub u32);

impl Energy {
    /// Rounds a keV value to the nearest milli-keV, clamping negatives to zero.
    pub fn from_kev(kev: f64) -> Self {
        if !(kev > 0.0) {
            return Energy(0);
        }
        let milli = (kev * 1000.0).round();
        Energy(if milli >= u32::MAX as f64 { u32::MAX } else { milli as u32 })
    }

    pub fn kev(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn milli_kev(self) -> u32 {
        self.0
    }
}

/// A readout record before calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RawHit {
    pub x: u16,
    pub y: u16,
    /// Coarse time-of-arrival clock ticks.
    pub toa_ticks: u64,
    /// Fine time-of-arrival ticks.
    pub ftoa_ticks: u32,
    /// Time-over-threshold clock ticks.
    pub tot_ticks: u32,
}

/// A calibrated pixel activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Hit {
    pub x: u16,
    pub y: u16,
    /// Time of arrival in nanoseconds.
    pub toa: Nanos,
    pub energy: Energy,
}

impl Hit {
    pub fn new(x: u16, y: u16, toa: Nanos, energy: Energy) -> Self {
        Self { x, y, toa, energy }
    }

    /// Shorthand for a hit with zero energy, mostly useful in tests.
    pub fn at(x: u16, y: u16, toa: Nanos) -> Self {
        Self::new(x, y, toa, Energy(0))
    }

    /// True if the two pixels are equal or 8-adjacent.
    #[inline]
    pub fn touches(&self, other: &Hit) -> bool {
        self.x.abs_diff(other.x) <= 1 && self.y.abs_diff(other.y) <= 1
    }
}

/// Sign with which the fine ToA correction is applied to the coarse time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FineToaSign {
    /// `toa = coarse - fine` (Timepix3 convention).
    #[default]
    Subtract,
    Add,
}

/// Linear ToT to energy map of one pixel: `energy = gain * tot + offset` (keV).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCalibration {
    pub gain: f32,
    pub offset: f32,
}

impl PixelCalibration {
    pub const IDENTITY: PixelCalibration = PixelCalibration { gain: 1.0, offset: 0.0 };
}

/// Per-pixel calibration grid, row-major `y * width + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationMap {
    width: u16,
    height: u16,
    pixels: Vec<PixelCalibration>,
}

impl CalibrationMap {
    pub fn identity(width: u16, height: u16) -> Self {
        Self::uniform(width, height, PixelCalibration::IDENTITY)
    }

    pub fn uniform(width: u16, height: u16, cal: PixelCalibration) -> Self {
        Self { width, height, pixels: vec![cal; width as usize * height as usize] }
    }

    pub fn get(&self, x: u16, y: u16) -> PixelCalibration {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u16, y: u16, cal: PixelCalibration) -> Result<()> {
        if x >= self.width || y >= self.height {
            return Err(Error::CoordinateOutOfRange { x, y, width: self.width, height: self.height });
        }
        if !(cal.gain > 0.0) {
            return Err(Error::Config(format!("pixel ({x},{y}) has non-positive gain {}", cal.gain)));
        }
        self.pixels[y as usize * self.width as usize + x as usize] = cal;
        Ok(())
    }

    /// Loads a CSV grid with header `x,y,gain,offset`. Pixels not listed keep
    /// the identity calibration.
    pub fn from_csv(path: &Path, width: u16, height: u16) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            x: u16,
            y: u16,
            gain: f32,
            offset: f32,
        }
        let mut map = Self::identity(width, height);
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for (line, row) in rdr.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::Parse { offset: line as u64 + 2, msg: e.to_string() })?;
            map.set(row.x, row.y, PixelCalibration { gain: row.gain, offset: row.offset })?;
        }
        Ok(map)
    }
}

/// Detector geometry, clock ticks and calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub width: u16,
    pub height: u16,
    coarse_tick_fs: u64,
    fine_tick_fs: u64,
    pub fine_sign: FineToaSign,
    pub calibration: CalibrationMap,
}

impl Default for DetectorConfig {
    /// 256x256 Timepix3 matrix, 25 ns coarse and 1.5625 ns fine ticks,
    /// identity calibration.
    fn default() -> Self {
        Self::new(MATRIX_SIZE, MATRIX_SIZE, 25.0, 1.5625).expect("default detector config is valid")
    }
}

impl DetectorConfig {
    pub fn new(width: u16, height: u16, coarse_tick_ns: f64, fine_tick_ns: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config("matrix dimensions must be positive".into()));
        }
        let to_fs = |ns: f64, what: &str| -> Result<u64> {
            let fs = (ns * 1e6).round();
            if !(fs >= 1.0) || fs > u32::MAX as f64 {
                return Err(Error::Config(format!("{what} tick must be positive and below 4.29 ms, got {ns} ns")));
            }
            Ok(fs as u64)
        };
        Ok(Self {
            width,
            height,
            coarse_tick_fs: to_fs(coarse_tick_ns, "coarse")?,
            fine_tick_fs: to_fs(fine_tick_ns, "fine")?,
            fine_sign: FineToaSign::Subtract,
            calibration: CalibrationMap::identity(width, height),
        })
    }

    pub fn with_calibration(mut self, calibration: CalibrationMap) -> Result<Self> {
        if calibration.width != self.width || calibration.height != self.height {
            return Err(Error::Config(format!(
                "calibration grid is {}x{}, matrix is {}x{}",
                calibration.width, calibration.height, self.width, self.height
            )));
        }
        self.calibration = calibration;
        Ok(self)
    }

    pub fn coarse_tick_ns(&self) -> f64 {
        self.coarse_tick_fs as f64 / 1e6
    }

    pub fn fine_tick_ns(&self) -> f64 {
        self.fine_tick_fs as f64 / 1e6
    }

    pub fn contains(&self, x: u16, y: u16) -> bool {
        x < self.width && y < self.height
    }

    /// Tick to nanosecond conversion, rounded to the nearest ns and clamped at 0.
    pub fn toa_ns(&self, raw: &RawHit) -> Nanos {
        let coarse = raw.toa_ticks as u128 * self.coarse_tick_fs as u128;
        let fine = raw.ftoa_ticks as u128 * self.fine_tick_fs as u128;
        let fs = match self.fine_sign {
            FineToaSign::Subtract => coarse.saturating_sub(fine),
            FineToaSign::Add => coarse + fine,
        };
        let ns = (fs + FS_PER_NS / 2) / FS_PER_NS;
        ns.min(u64::MAX as u128) as u64
    }

    pub fn calibrate(&self, raw: &RawHit) -> Result<Hit> {
        if !self.contains(raw.x, raw.y) {
            return Err(Error::CoordinateOutOfRange { x: raw.x, y: raw.y, width: self.width, height: self.height });
        }
        let cal = self.calibration.get(raw.x, raw.y);
        let kev = cal.gain as f64 * raw.tot_ticks as f64 + cal.offset as f64;
        Ok(Hit { x: raw.x, y: raw.y, toa: self.toa_ns(raw), energy: Energy::from_kev(kev) })
    }

    /// Reads a TOML detector description:
    ///
    /// ```toml
    /// width = 256
    /// height = 256
    /// coarse_tick_ns = 25.0
    /// fine_tick_ns = 1.5625
    /// fine_sign = "subtract"
    /// calibration = "calib.csv"   # optional, relative to the config file
    /// ```
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let file: DetectorFile = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::new(file.width, file.height, file.coarse_tick_ns, file.fine_tick_ns)?;
        cfg.fine_sign = file.fine_sign;
        if let Some(cal) = file.calibration {
            let cal_path = path.parent().map(|p| p.join(&cal)).unwrap_or(cal);
            let map = CalibrationMap::from_csv(&cal_path, cfg.width, cfg.height)?;
            cfg = cfg.with_calibration(map)?;
        }
        Ok(cfg)
    }
}

#[derive(Deserialize)]
struct DetectorFile {
    #[serde(default = "default_dim")]
    width: u16,
    #[serde(default = "default_dim")]
    height: u16,
    #[serde(default = "default_coarse")]
    coarse_tick_ns: f64,
    #[serde(default = "default_fine")]
    fine_tick_ns: f64,
    #[serde(default)]
    fine_sign: FineToaSign,
    calibration: Option<PathBuf>,
}

fn default_dim() -> u16 {
    MATRIX_SIZE
}
fn default_coarse() -> f64 {
    25.0
}
fn default_fine() -> f64 {
    1.5625
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(x: u16, y: u16, toa_ticks: u64, ftoa_ticks: u32, tot_ticks: u32) -> RawHit {
        RawHit { x, y, toa_ticks, ftoa_ticks, tot_ticks }
    }

    // Scalar reference evaluation of the calibration formula in f64.
    fn reference(raw: &RawHit, coarse: f64, fine: f64, gain: f64, offset: f64) -> (f64, f64) {
        let toa = (raw.toa_ticks as f64 * coarse - raw.ftoa_ticks as f64 * fine).max(0.0);
        let e = (gain * raw.tot_ticks as f64 + offset).max(0.0);
        (toa, e)
    }

    #[test]
    fn zero_hit_calibrates_to_zero() {
        let cfg = DetectorConfig::default();
        let hit = cfg.calibrate(&raw(0, 0, 0, 0, 0)).unwrap();
        assert_eq!(hit, Hit::at(0, 0, 0));
    }

    #[test]
    fn coarse_ticks_scale_to_ns() {
        let cfg = DetectorConfig::default();
        let hit = cfg.calibrate(&raw(3, 4, 100, 0, 10)).unwrap();
        assert_eq!(hit.toa, 2500);
        assert_eq!(hit.energy, Energy(10_000));
        assert_eq!((hit.x, hit.y), (3, 4));
    }

    #[test]
    fn fine_correction_and_energy_clamp() {
        let cal = CalibrationMap::uniform(256, 256, PixelCalibration { gain: 2.0, offset: -10.0 });
        let cfg = DetectorConfig::default().with_calibration(cal).unwrap();
        let r = raw(0, 0, 100, 16, 4);
        let hit = cfg.calibrate(&r).unwrap();
        let (toa, e) = reference(&r, 25.0, 1.5625, 2.0, -10.0);
        assert_eq!(toa, 2475.0);
        assert_eq!(e, 0.0);
        assert_eq!(hit.toa, 2475);
        assert_eq!(hit.energy, Energy(0));
    }

    #[test]
    fn toa_clamps_at_zero() {
        let cfg = DetectorConfig::default();
        assert_eq!(cfg.toa_ns(&raw(0, 0, 0, 15, 0)), 0);
    }

    #[test]
    fn out_of_range_pixel_is_rejected() {
        let cfg = DetectorConfig::default();
        assert!(matches!(cfg.calibrate(&raw(256, 0, 0, 0, 0)), Err(Error::CoordinateOutOfRange { .. })));
    }

    #[test]
    fn non_positive_gain_rejected() {
        let mut map = CalibrationMap::identity(4, 4);
        assert!(map.set(1, 1, PixelCalibration { gain: 0.0, offset: 0.0 }).is_err());
    }

    #[test]
    fn toml_config_with_calibration_csv() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cal.csv"), "x,y,gain,offset\n1,2,3.0,1.5\n").unwrap();
        std::fs::write(
            dir.path().join("det.toml"),
            "width = 16\nheight = 8\ncoarse_tick_ns = 25.0\nfine_tick_ns = 1.5625\ncalibration = \"cal.csv\"\n",
        )
        .unwrap();
        let cfg = DetectorConfig::from_toml_file(&dir.path().join("det.toml")).unwrap();
        assert_eq!((cfg.width, cfg.height), (16, 8));
        let hit = cfg.calibrate(&raw(1, 2, 4, 0, 10)).unwrap();
        assert_eq!(hit.energy, Energy(31_500));
        assert_eq!(cfg.calibrate(&raw(0, 0, 4, 0, 10)).unwrap().energy, Energy(10_000));
    }

    proptest::proptest! {
        #[test]
        fn energy_is_monotone_in_tot(gain in 0.01f32..10.0, offset in -50.0f32..50.0, a in 0u32..100_000, b in 0u32..100_000) {
            let cal = CalibrationMap::uniform(8, 8, PixelCalibration { gain, offset });
            let cfg = DetectorConfig::new(8, 8, 25.0, 1.5625).unwrap().with_calibration(cal).unwrap();
            let (lo, hi) = (a.min(b), a.max(b));
            let e_lo = cfg.calibrate(&raw(1, 1, 0, 0, lo)).unwrap().energy;
            let e_hi = cfg.calibrate(&raw(1, 1, 0, 0, hi)).unwrap().energy;
            proptest::prop_assert!(e_lo <= e_hi);
        }

        #[test]
        fn toa_matches_reference(ticks in 0u64..1u64 << 40, fine in 0u32..16) {
            let cfg = DetectorConfig::default();
            let r = raw(0, 0, ticks, fine, 0);
            let exact = ticks as i128 * 25_000_000 - fine as i128 * 1_562_500;
            let expect = if exact <= 0 { 0 } else { ((exact + 500_000) / 1_000_000) as u64 };
            proptest::prop_assert_eq!(cfg.toa_ns(&r), expect);
        }
    }
}
