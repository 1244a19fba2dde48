//! OCV-SOC curves.
//!
//! A curve is a piecewise-linear interpolant over `(soc, ocv)` knots. The
//! filter needs three things from it: the value, the slope (for the
//! measurement Jacobian) and controlled distortions of it, which stand in
//! for the curve drift that aging and temperature cause in real cells.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Largest downward step between neighbouring knots that is accepted without
/// a warning. Measured curves wiggle by a fraction of a millivolt.
pub const DIP_TOLERANCE_V: f64 = 5e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct OscCurve {
    soc: Vec<f64>,
    ocv: Vec<f64>,
}

/// A distortion applied to a curve to build a deliberately wrong filter curve.
#[derive(Debug, Clone, PartialEq)]
pub enum CurveTransform {
    /// Adds a constant (volt) to every knot.
    VoltageOffset(f64),
    /// Moves every knot along the SOC axis (fraction); the original domain is kept.
    SocShift(f64),
    /// Scales the deviation of each knot from the mean knot voltage.
    SlopeScale(f64),
    /// Pointwise convex combination `(1 - weight) * self + weight * other`.
    BlendToward { other: OscCurve, weight: f64 },
}

impl OscCurve {
    pub fn new(knots: &[(f64, f64)]) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::InvalidCurve(format!("need at least 2 knots, got {}", knots.len())));
        }
        for (i, &(s, v)) in knots.iter().enumerate() {
            if !s.is_finite() || !v.is_finite() {
                return Err(Error::InvalidCurve(format!("knot {i} is not finite")));
            }
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::InvalidCurve(format!("knot {i}: soc {s} outside [0, 1]")));
            }
            if i > 0 && s <= knots[i - 1].0 {
                return Err(Error::InvalidCurve(format!("knot {i}: soc {s} not strictly increasing")));
            }
        }
        let curve = OscCurve { soc: knots.iter().map(|k| k.0).collect(), ocv: knots.iter().map(|k| k.1).collect() };
        for i in curve.dips(DIP_TOLERANCE_V) {
            log::warn!(
                "OCV curve decreases between soc {} and {} ({} V -> {} V)",
                curve.soc[i],
                curve.soc[i + 1],
                curve.ocv[i],
                curve.ocv[i + 1]
            );
        }
        Ok(curve)
    }

    /// Indices `i` where the segment `i -> i + 1` drops by more than `tolerance` volts.
    pub fn dips(&self, tolerance: f64) -> Vec<usize> {
        (0..self.ocv.len() - 1).filter(|&i| self.ocv[i + 1] < self.ocv[i] - tolerance).collect()
    }

    pub fn knots(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.soc.iter().copied().zip(self.ocv.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.soc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.soc.is_empty()
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.soc[0], self.soc[self.soc.len() - 1])
    }

    pub fn contains(&self, soc: f64) -> bool {
        let (lo, hi) = self.domain();
        soc >= lo && soc <= hi
    }

    fn check_domain(&self, soc: f64) -> Result<()> {
        if self.contains(soc) {
            Ok(())
        } else {
            let (lo, hi) = self.domain();
            Err(Error::Domain { soc, lo, hi })
        }
    }

    /// Index of the segment containing `soc`: `soc[i] <= soc < soc[i + 1]`,
    /// with the last knot mapped to the last segment.
    fn segment(&self, soc: f64) -> usize {
        let i = self.soc.partition_point(|&s| s <= soc);
        i.saturating_sub(1).min(self.soc.len() - 2)
    }

    fn segment_slope(&self, i: usize) -> f64 {
        (self.ocv[i + 1] - self.ocv[i]) / (self.soc[i + 1] - self.soc[i])
    }

    /// Open-circuit voltage at `soc`. Exact at knots; never extrapolates.
    pub fn ocv(&self, soc: f64) -> Result<f64> {
        self.check_domain(soc)?;
        let i = self.segment(soc);
        if soc == self.soc[i] {
            return Ok(self.ocv[i]);
        }
        if soc == self.soc[i + 1] {
            return Ok(self.ocv[i + 1]);
        }
        let w = (soc - self.soc[i]) / (self.soc[i + 1] - self.soc[i]);
        Ok(self.ocv[i] + w * (self.ocv[i + 1] - self.ocv[i]))
    }

    /// dOCV/dSOC. Interior knots take the mean of the adjacent segment
    /// slopes, boundary knots the one-sided slope.
    pub fn slope(&self, soc: f64) -> Result<f64> {
        self.check_domain(soc)?;
        let last = self.soc.len() - 1;
        if let Ok(k) = self.soc.binary_search_by(|s| s.partial_cmp(&soc).expect("finite knots")) {
            return Ok(match k {
                0 => self.segment_slope(0),
                k if k == last => self.segment_slope(last - 1),
                k => 0.5 * (self.segment_slope(k - 1) + self.segment_slope(k)),
            });
        }
        Ok(self.segment_slope(self.segment(soc)))
    }

    /// Largest absolute segment slope; a Lipschitz constant for [`OscCurve::ocv`].
    pub fn max_abs_slope(&self) -> f64 {
        (0..self.soc.len() - 1).map(|i| self.segment_slope(i).abs()).fold(0.0, f64::max)
    }

    pub fn apply_transform(&self, t: &CurveTransform) -> Result<OscCurve> {
        let knots: Vec<(f64, f64)> = match t {
            CurveTransform::VoltageOffset(dv) => {
                finite_magnitude(*dv)?;
                self.knots().map(|(s, v)| (s, v + dv)).collect()
            }
            CurveTransform::SocShift(ds) => {
                finite_magnitude(*ds)?;
                self.soc_shifted(*ds)?
            }
            CurveTransform::SlopeScale(k) => {
                finite_magnitude(*k)?;
                if *k < 0.0 {
                    return Err(Error::InvalidTransform(format!("slope scale {k} would reverse the curve")));
                }
                let mean = self.ocv.iter().sum::<f64>() / self.ocv.len() as f64;
                self.knots().map(|(s, v)| (s, mean + k * (v - mean))).collect()
            }
            CurveTransform::BlendToward { other, weight } => {
                if !(0.0..=1.0).contains(weight) {
                    return Err(Error::InvalidTransform(format!("blend weight {weight} outside [0, 1]")));
                }
                self.blended(other, *weight)?
            }
        };
        let out = OscCurve::new(&knots).map_err(|e| Error::InvalidTransform(e.to_string()))?;
        if out.dips(DIP_TOLERANCE_V).len() > self.dips(DIP_TOLERANCE_V).len() {
            return Err(Error::InvalidTransform("transform introduces a decreasing OCV segment".into()));
        }
        Ok(out)
    }

    fn soc_shifted(&self, ds: f64) -> Result<Vec<(f64, f64)>> {
        let (lo, hi) = self.domain();
        let clamp = |s: f64| s.clamp(lo, hi);
        let mut knots = vec![(lo, self.ocv(clamp(lo - ds))?)];
        knots.extend(self.knots().map(|(s, v)| (s + ds, v)).filter(|&(s, _)| s > lo && s < hi));
        knots.push((hi, self.ocv(clamp(hi - ds))?));
        Ok(knots)
    }

    fn blended(&self, other: &OscCurve, w: f64) -> Result<Vec<(f64, f64)>> {
        let (a_lo, a_hi) = self.domain();
        let (b_lo, b_hi) = other.domain();
        let (lo, hi) = (a_lo.max(b_lo), a_hi.min(b_hi));
        if lo >= hi {
            return Err(Error::InvalidTransform("blend curves have disjoint domains".into()));
        }
        let mut socs: Vec<f64> =
            self.soc.iter().chain(other.soc.iter()).copied().filter(|&s| s >= lo && s <= hi).collect();
        socs.push(lo);
        socs.push(hi);
        socs.sort_by(|a, b| a.partial_cmp(b).expect("finite knots"));
        socs.dedup();
        socs.into_iter().map(|s| Ok((s, (1.0 - w) * self.ocv(s)? + w * other.ocv(s)?))).collect()
    }

    /// Adds `offset` volts to every knot strictly inside `(lo, hi)`; the
    /// neighbouring segments taper linearly back to the unmodified curve.
    /// Extra knots are inserted at `lo - taper` and `hi + taper` so the
    /// distortion stays local.
    pub fn with_region_offset(&self, lo: f64, hi: f64, taper: f64, offset: f64) -> Result<OscCurve> {
        for (name, v) in [("lo", lo), ("hi", hi), ("taper", taper), ("offset", offset)] {
            ensure_finite(name, v)?;
        }
        if !(lo < hi) || taper <= 0.0 {
            return Err(Error::InvalidTransform(format!(
                "region offset needs lo < hi and taper > 0 (lo={lo}, hi={hi}, taper={taper})"
            )));
        }
        let (d_lo, d_hi) = self.domain();
        let weight = |s: f64| -> f64 {
            if s >= lo && s <= hi {
                1.0
            } else if s < lo {
                (1.0 - (lo - s) / taper).max(0.0)
            } else {
                (1.0 - (s - hi) / taper).max(0.0)
            }
        };
        let mut socs: Vec<f64> = self.soc.clone();
        for s in [lo - taper, lo, hi, hi + taper] {
            if s > d_lo && s < d_hi {
                socs.push(s);
            }
        }
        socs.sort_by(|a, b| a.partial_cmp(b).expect("finite knots"));
        socs.dedup();
        let knots = socs.into_iter().map(|s| Ok((s, self.ocv(s)? + offset * weight(s)))).collect::<Result<Vec<_>>>()?;
        OscCurve::new(&knots)
    }

    /// Reads a `soc,ocv_v` CSV. Errors name the offending data row (1-based, header excluded).
    pub fn read_csv<R: Read>(reader: R) -> Result<OscCurve> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        for col in ["soc", "ocv_v"] {
            if !headers.iter().any(|h| h == col) {
                return Err(Error::Parse {
                    context: "curve".into(),
                    line: 1,
                    message: format!("missing column `{col}`"),
                });
            }
        }
        let mut knots: Vec<(f64, f64)> = Vec::new();
        for (i, rec) in rdr.deserialize::<CurveRow>().enumerate() {
            let row = i + 1;
            let rec =
                rec.map_err(|e| Error::Parse { context: "curve".into(), line: row + 1, message: e.to_string() })?;
            if let Some(&(prev, _)) = knots.last() {
                if rec.soc <= prev {
                    return Err(Error::Parse {
                        context: "curve".into(),
                        line: row + 1,
                        message: format!("soc {} not ascending (previous {prev})", rec.soc),
                    });
                }
            }
            if !(0.0..=1.0).contains(&rec.soc) || !rec.ocv_v.is_finite() {
                return Err(Error::Parse {
                    context: "curve".into(),
                    line: row + 1,
                    message: format!("invalid knot ({}, {})", rec.soc, rec.ocv_v),
                });
            }
            knots.push((rec.soc, rec.ocv_v));
        }
        OscCurve::new(&knots)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<OscCurve> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        OscCurve::read_csv(f)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for (soc, ocv_v) in self.knots() {
            w.serialize(CurveRow { soc, ocv_v })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// A 25 °C-style LiFePO₄ curve: steep below 10 % and above 95 % SOC,
    /// two shallow plateaus in between with a small step near 65 %.
    pub fn lifepo4_reference() -> OscCurve {
        OscCurve::new(&LIFEPO4_KNOTS).expect("reference knots are valid")
    }
}

const LIFEPO4_KNOTS: [(f64, f64); 21] = [
    (0.00, 2.600),
    (0.02, 2.950),
    (0.05, 3.120),
    (0.10, 3.195),
    (0.15, 3.225),
    (0.20, 3.245),
    (0.25, 3.258),
    (0.30, 3.266),
    (0.40, 3.278),
    (0.50, 3.287),
    (0.60, 3.296),
    (0.65, 3.306),
    (0.70, 3.318),
    (0.75, 3.326),
    (0.80, 3.333),
    (0.85, 3.339),
    (0.90, 3.346),
    (0.93, 3.356),
    (0.96, 3.378),
    (0.98, 3.410),
    (1.00, 3.480),
];

/// `g = ocv(actual) - ocv(original)`: how far the filter's curve sits below the cell's.
pub fn curve_error(actual: &OscCurve, original: &OscCurve, soc: f64) -> Result<f64> {
    Ok(actual.ocv(soc)? - original.ocv(soc)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct CurveRow {
    soc: f64,
    ocv_v: f64,
}

fn finite_magnitude(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTransform(format!("magnitude {v} is not finite")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_segments() -> OscCurve {
        OscCurve::new(&[(0.2, 3.20), (0.4, 3.30), (0.6, 3.32)]).unwrap()
    }

    #[test]
    fn exact_at_knots() {
        let c = OscCurve::lifepo4_reference();
        for (s, v) in c.knots() {
            assert_eq!(c.ocv(s).unwrap(), v);
        }
    }

    #[test]
    fn midpoint_of_segment() {
        let c = two_segments();
        assert!((c.ocv(0.3).unwrap() - 3.25).abs() < 1e-12);
    }

    #[test]
    fn no_extrapolation() {
        let c = two_segments();
        assert!(matches!(c.ocv(0.1), Err(Error::Domain { .. })));
        assert!(matches!(c.ocv(0.61), Err(Error::Domain { .. })));
        assert!(matches!(c.slope(-0.01), Err(Error::Domain { .. })));
        let full = OscCurve::lifepo4_reference();
        assert!(full.ocv(1.0 + 1e-12).is_err());
        assert!(full.ocv(0.0).is_ok());
    }

    #[test]
    fn slope_rules() {
        let c = two_segments();
        assert!((c.slope(0.25).unwrap() - 0.5).abs() < 1e-12);
        // interior knot: mean of 0.5 and 0.1
        assert!((c.slope(0.4).unwrap() - 0.3).abs() < 1e-12);
        // boundary knots are one-sided
        assert!((c.slope(0.2).unwrap() - 0.5).abs() < 1e-12);
        assert!((c.slope(0.6).unwrap() - 0.1).abs() < 1e-12);

        let flat = OscCurve::new(&[(0.0, 3.3), (0.5, 3.3), (1.0, 3.3)]).unwrap();
        for s in [0.0, 0.25, 0.5, 0.9, 1.0] {
            assert_eq!(flat.slope(s).unwrap(), 0.0);
        }
    }

    #[test]
    fn rejects_bad_knots() {
        assert!(OscCurve::new(&[(0.0, 3.0)]).is_err());
        assert!(OscCurve::new(&[(0.0, 3.0), (0.0, 3.1)]).is_err());
        assert!(OscCurve::new(&[(0.5, 3.0), (0.2, 3.1)]).is_err());
        assert!(OscCurve::new(&[(0.0, 3.0), (1.2, 3.1)]).is_err());
        assert!(OscCurve::new(&[(0.0, f64::NAN), (1.0, 3.1)]).is_err());
        // a small dip is accepted
        let c = OscCurve::new(&[(0.0, 3.0), (0.5, 3.2), (0.6, 3.1999), (1.0, 3.4)]).unwrap();
        assert!(c.dips(DIP_TOLERANCE_V).is_empty());
        assert_eq!(c.dips(0.0), vec![1]);
    }

    #[test]
    fn resampling_reproduces_the_curve() {
        let c = OscCurve::lifepo4_reference();
        // 1001 uniform samples contain every reference knot (all are multiples of 0.01)
        let samples: Vec<(f64, f64)> = (0..=1000)
            .map(|k| {
                let s = k as f64 / 1000.0;
                (s, c.ocv(s).unwrap())
            })
            .collect();
        let rebuilt = OscCurve::new(&samples).unwrap();
        for k in 0..=9973 {
            let s = k as f64 / 9973.0;
            let d = (rebuilt.ocv(s).unwrap() - c.ocv(s).unwrap()).abs();
            assert!(d < 1e-9, "soc {s}: {d}");
        }
    }

    #[test]
    fn curve_error_sign_changes_match_crossings() {
        let a = OscCurve::new(&[(0.0, 3.0), (0.3, 3.25), (0.6, 3.30), (1.0, 3.45)]).unwrap();
        let b = OscCurve::new(&[(0.0, 3.05), (0.2, 3.20), (0.5, 3.31), (0.8, 3.33), (1.0, 3.40)]).unwrap();
        // dense sampling of both curves
        let n = 20_000;
        let diffs: Vec<f64> = (0..=n).map(|k| curve_error(&a, &b, k as f64 / n as f64).unwrap()).collect();
        let sign_changes =
            diffs.windows(2).filter(|w| w[0] != 0.0 && w[1] != 0.0 && w[0].signum() != w[1].signum()).count();
        // transversal intersections counted on the merged knot grid, where
        // both curves are linear and a sign change pins exactly one root
        let mut grid: Vec<f64> = a.knots().chain(b.knots()).map(|k| k.0).collect();
        grid.sort_by(|x, y| x.partial_cmp(y).unwrap());
        grid.dedup();
        let crossings = grid
            .windows(2)
            .filter(|w| {
                let d0 = curve_error(&a, &b, w[0]).unwrap();
                let d1 = curve_error(&a, &b, w[1]).unwrap();
                d0 * d1 < 0.0
            })
            .count();
        assert_eq!(sign_changes, crossings);
        assert!(crossings >= 2);
    }

    #[test]
    fn transforms() {
        let c = OscCurve::lifepo4_reference();
        assert_eq!(c.apply_transform(&CurveTransform::VoltageOffset(0.0)).unwrap(), c);
        assert_eq!(c.apply_transform(&CurveTransform::SlopeScale(1.0)).unwrap(), c);
        assert_eq!(c.apply_transform(&CurveTransform::SocShift(0.0)).unwrap(), c);

        let up = c.apply_transform(&CurveTransform::VoltageOffset(0.02)).unwrap();
        for s in [0.0, 0.13, 0.5, 0.77, 1.0] {
            assert!((curve_error(&up, &c, s).unwrap() - 0.02).abs() < 1e-12);
        }

        let other = OscCurve::new(&[(0.0, 2.8), (0.45, 3.29), (1.0, 3.5)]).unwrap();
        let all_other = c.apply_transform(&CurveTransform::BlendToward { other: other.clone(), weight: 1.0 }).unwrap();
        let half = c.apply_transform(&CurveTransform::BlendToward { other: other.clone(), weight: 0.5 }).unwrap();
        for k in 0..=400 {
            let s = k as f64 / 400.0;
            let (va, vb) = (c.ocv(s).unwrap(), other.ocv(s).unwrap());
            assert!((all_other.ocv(s).unwrap() - vb).abs() < 1e-12);
            assert!((half.ocv(s).unwrap() - 0.5 * (va + vb)).abs() < 1e-12);
        }

        assert!(c.apply_transform(&CurveTransform::SlopeScale(-1.0)).is_err());
        assert!(c.apply_transform(&CurveTransform::BlendToward { other, weight: 1.5 }).is_err());
        assert!(c.apply_transform(&CurveTransform::VoltageOffset(f64::NAN)).is_err());
    }

    #[test]
    fn soc_shift_keeps_domain() {
        let c = OscCurve::lifepo4_reference();
        let shifted = c.apply_transform(&CurveTransform::SocShift(0.05)).unwrap();
        assert_eq!(shifted.domain(), c.domain());
        // interior point moved right by 0.05
        assert!((shifted.ocv(0.55).unwrap() - c.ocv(0.50).unwrap()).abs() < 1e-12);
        // the left edge holds the original boundary value
        assert_eq!(shifted.ocv(0.0).unwrap(), c.ocv(0.0).unwrap());
    }

    #[test]
    fn region_offset_is_local() {
        let c = OscCurve::lifepo4_reference();
        let o = c.with_region_offset(0.2, 0.6, 0.1, 0.02).unwrap();
        assert!((curve_error(&o, &c, 0.4).unwrap() - 0.02).abs() < 1e-12);
        assert!((curve_error(&o, &c, 0.15).unwrap() - 0.01).abs() < 1e-12);
        assert_eq!(curve_error(&o, &c, 0.05).unwrap(), 0.0);
        assert_eq!(curve_error(&o, &c, 0.9).unwrap(), 0.0);
    }

    #[test]
    fn csv_round_trip_and_row_errors() {
        let c = OscCurve::lifepo4_reference();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("soc,ocv_v\n"));
        assert_eq!(OscCurve::read_csv(buf.as_slice()).unwrap(), c);

        let bad = "soc,ocv_v\n0.0,3.0\n0.5,3.2\n0.4,3.3\n";
        match OscCurve::read_csv(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        let bad = "soc,ocv_v\n0.0,3.0\n0.5,abc\n";
        assert!(matches!(OscCurve::read_csv(bad.as_bytes()), Err(Error::Parse { line: 3, .. })));
        let missing = "soc,volts\n0.0,3.0\n";
        assert!(OscCurve::read_csv(missing.as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn slope_matches_central_differences(k in 0usize..1000) {
            let c = OscCurve::lifepo4_reference();
            // non-knot points
            let s = (k as f64 + 0.37) / 1000.0;
            let h = 1e-7;
            let fd = (c.ocv(s + h).unwrap() - c.ocv(s - h).unwrap()) / (2.0 * h);
            let an = c.slope(s).unwrap();
            prop_assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{} vs {}", fd, an);
        }

        #[test]
        fn lipschitz_bound(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let c = OscCurve::lifepo4_reference();
            let l = c.max_abs_slope();
            let d = (c.ocv(a).unwrap() - c.ocv(b).unwrap()).abs();
            prop_assert!(d <= l * (a - b).abs() + 1e-12);
        }

        #[test]
        fn curve_error_antisymmetric(s in 0.0f64..=1.0, dv in -0.05f64..0.05) {
            let a = OscCurve::lifepo4_reference();
            let b = a.with_region_offset(0.2, 0.7, 0.05, dv).unwrap();
            prop_assert_eq!(curve_error(&a, &b, s).unwrap(), -curve_error(&b, &a, s).unwrap());
        }
    }
}
