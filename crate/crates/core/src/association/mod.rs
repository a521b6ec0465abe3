//! Doppler-space association: matching per-pair Doppler peak tuples to
//! coarse target locations and recovering velocity vectors.

pub mod lap;

use std::fmt::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::DopplerPeakSet;
use crate::error::{Error, Result};
use crate::geometry::{doppler_gradient, Device, Vec2};
pub use lap::{min_cost_matching, solve_assignment, total_cost, CostMatrix};

/// Rows `(f0/c) (u_n - u_m)` of the velocity regression at one location,
/// with the inverse of their Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityRegression {
    pub rows: Vec<Vec2>,
    /// `(U^T U)^-1` as `[a, b, b, d]`, `None` when `U` is rank deficient.
    gram_inv: Option<[f64; 4]>,
}

impl VelocityRegression {
    pub fn at(devices: &[Device], location: Vec2, f0: f64) -> Result<Self> {
        let mut rows = Vec::with_capacity(devices.len() * devices.len());
        for tx in devices {
            for rx in devices {
                rows.push(doppler_gradient(tx, rx, location, f0)?);
            }
        }
        Ok(Self::from_rows(rows))
    }

    pub fn from_rows(rows: Vec<Vec2>) -> Self {
        let (mut a, mut b, mut d) = (0.0, 0.0, 0.0);
        for r in &rows {
            a += r.x * r.x;
            b += r.x * r.y;
            d += r.y * r.y;
        }
        let det = a * d - b * b;
        let scale = (a + d) * (a + d);
        let gram_inv = (scale > 0.0 && det > 1e-12 * scale).then(|| [d / det, -b / det, -b / det, a / det]);
        Self { rows, gram_inv }
    }

    pub fn is_full_rank(&self) -> bool {
        self.gram_inv.is_some()
    }

    /// `pinv(U) f`.
    pub fn solve(&self, f: &[f64]) -> Option<Vec2> {
        let g = self.gram_inv?;
        let (mut sx, mut sy) = (0.0, 0.0);
        for (r, &v) in self.rows.iter().zip(f) {
            sx += r.x * v;
            sy += r.y * v;
        }
        Some(Vec2::new(g[0] * sx + g[1] * sy, g[2] * sx + g[3] * sy))
    }

    /// `U v`.
    pub fn predict(&self, v: Vec2) -> Vec<f64> {
        self.rows.iter().map(|r| r.dot(v)).collect()
    }

    /// Least-squares residual `||f - U pinv(U) f||^2` and the fitted velocity;
    /// infinite cost when `U` is rank deficient.
    pub fn cost(&self, f: &[f64]) -> (f64, Option<Vec2>) {
        match self.solve(f) {
            Some(v) => {
                let c = self.rows.iter().zip(f).map(|(r, &y)| (y - r.dot(v)).powi(2)).sum();
                (c, Some(v))
            }
            None => (f64::INFINITY, None),
        }
    }
}

/// LS association cost of a Doppler tuple with a location.
pub fn association_cost(frequencies: &[f64], location: Vec2, devices: &[Device], f0: f64) -> Result<(f64, Option<Vec2>)> {
    let u = VelocityRegression::at(devices, location, f0)?;
    if frequencies.len() != u.rows.len() {
        return Err(Error::LengthMismatch {
            expected: u.rows.len(),
            found: frequencies.len(),
        });
    }
    Ok(u.cost(frequencies))
}

/// Velocity resolution `|pinv(U) 1| * df` per component.
pub fn velocity_resolution(location: Vec2, devices: &[Device], f0: f64, doppler_resolution: f64) -> Result<Vec2> {
    let u = VelocityRegression::at(devices, location, f0)?;
    let ones = vec![doppler_resolution; u.rows.len()];
    let v = u
        .solve(&ones)
        .ok_or(Error::RankDeficient)?;
    Ok(Vec2::new(v.x.abs(), v.y.abs()))
}

/// Per-pair candidate frequencies from which tuples are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TupleSpace {
    /// `candidates[pair]` holds exactly `count` frequencies, ascending.
    pub candidates: Vec<Vec<f64>>,
    /// Marks zero-frequency entries added for pairs with too few peaks.
    pub padded: Vec<Vec<bool>>,
    pub count: usize,
}

impl TupleSpace {
    /// Keeps the `count` strongest peaks of each pair and pads short pairs
    /// with 0 Hz pseudo-peaks.
    pub fn new(peaks: &DopplerPeakSet, count: usize) -> Self {
        let mut candidates = Vec::with_capacity(peaks.peaks.len());
        let mut padded = Vec::with_capacity(peaks.peaks.len());
        for list in &peaks.peaks {
            let mut strongest = list.clone();
            strongest.sort_by(|a, b| b.magnitude.total_cmp(&a.magnitude).then(a.frequency.total_cmp(&b.frequency)));
            strongest.truncate(count);
            let mut entries: Vec<(f64, bool)> = strongest.iter().map(|p| (p.frequency, false)).collect();
            while entries.len() < count {
                entries.push((0.0, true));
            }
            entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            candidates.push(entries.iter().map(|e| e.0).collect());
            padded.push(entries.iter().map(|e| e.1).collect());
        }
        Self { candidates, padded, count }
    }

    pub fn pair_count(&self) -> usize {
        self.candidates.len()
    }

    /// `count^pairs`, as a float because it overflows quickly.
    pub fn size(&self) -> f64 {
        (self.count as f64).powi(self.pair_count() as i32)
    }

    /// Frequencies of tuple `index`; the first pair is the most significant digit.
    pub fn tuple(&self, index: u64, out: &mut [f64]) {
        let mut rest = index;
        let q = self.count as u64;
        for pair in (0..self.pair_count()).rev() {
            out[pair] = self.candidates[pair][(rest % q) as usize];
            rest /= q;
        }
    }

    pub fn frequencies(&self, index: u64) -> Vec<f64> {
        let mut f = vec![0.0; self.pair_count()];
        self.tuple(index, &mut f);
        f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationConfig {
    /// Drop tuples whose best LS residual over all locations exceeds
    /// `prefilter_factor * df^2 * pairs`.
    pub prefilter: bool,
    pub prefilter_factor: f64,
    /// Largest tuple count enumerated without the prefilter.
    pub tuple_cap: usize,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            prefilter: false,
            prefilter_factor: 10.0,
            tuple_cap: 1_000_000,
        }
    }
}

/// Enumerates tuple indices in lexicographic order, optionally keeping only
/// those that fit some location well.
pub fn enumerate_tuples(
    space: &TupleSpace,
    regressions: &[VelocityRegression],
    doppler_resolution: f64,
    cfg: &AssociationConfig,
) -> Result<Vec<u64>> {
    let size = space.size();
    if !cfg.prefilter {
        if size > cfg.tuple_cap as f64 {
            return Err(Error::TupleCapExceeded {
                count: size,
                cap: cfg.tuple_cap,
            });
        }
        return Ok((0..size as u64).collect());
    }
    if size > u64::MAX as f64 / 2.0 {
        return Err(Error::TupleCapExceeded {
            count: size,
            cap: cfg.tuple_cap,
        });
    }
    let limit = cfg.prefilter_factor * doppler_resolution * doppler_resolution * space.pair_count() as f64;
    let kept: Vec<u64> = (0..size as u64)
        .into_par_iter()
        .map_init(
            || vec![0.0; space.pair_count()],
            |f, p| {
                space.tuple(p, f);
                let best = regressions.iter().map(|u| u.cost(f).0).fold(f64::INFINITY, f64::min);
                (best <= limit).then_some(p)
            },
        )
        .flatten()
        .collect();
    if kept.len() > cfg.tuple_cap {
        return Err(Error::TupleCapExceeded {
            count: kept.len() as f64,
            cap: cfg.tuple_cap,
        });
    }
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssociationResult {
    pub space: TupleSpace,
    /// Tuple index of every cost-matrix row.
    pub tuples: Vec<u64>,
    /// Rows are tuples, columns targets.
    pub costs: CostMatrix,
    /// Best-fit velocity of every cost-matrix entry, row-major.
    pub fitted: Vec<Vec2>,
    /// Cost-matrix row assigned to each target.
    pub assignment: Vec<usize>,
    pub locations: Vec<Vec2>,
    pub velocities: Vec<Vec2>,
    pub resolutions: Vec<Vec2>,
}

impl AssociationResult {
    /// Frequencies of the tuple assigned to target `q`.
    pub fn assigned_frequencies(&self, q: usize) -> Vec<f64> {
        self.space.frequencies(self.tuples[self.assignment[q]])
    }

    pub fn total_cost(&self) -> f64 {
        total_cost(&self.costs, &self.assignment)
    }

    /// CSV of the `limit` lowest-cost (tuple, target) entries.
    pub fn table_csv(&self, limit: usize) -> String {
        let cols = self.costs.cols;
        let mut entries: Vec<(f64, usize, usize)> = (0..self.costs.rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .map(|(r, c)| (self.costs.get(r, c), r, c))
            .collect();
        entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut out = String::from("tuple,target");
        for p in 0..self.space.pair_count() {
            let _ = write!(out, ",f{p}_hz");
        }
        out.push_str(",x_m,y_m,vx_mps,vy_mps,cost_hz2,chosen\n");
        for &(cost, r, c) in entries.iter().take(limit) {
            let _ = write!(out, "{},{}", self.tuples[r], c);
            for v in self.space.frequencies(self.tuples[r]) {
                let _ = write!(out, ",{v}");
            }
            let (loc, vel) = (self.locations[c], self.fitted[r * cols + c]);
            let _ = writeln!(
                out,
                ",{},{},{},{},{},{}",
                loc.x,
                loc.y,
                vel.x,
                vel.y,
                cost,
                self.assignment[c] == r
            );
        }
        out
    }
}

/// Builds the tuple set, evaluates every (tuple, location) cost, solves the
/// assignment and fits one velocity per location.
pub fn associate(
    peaks: &DopplerPeakSet,
    locations: &[Vec2],
    devices: &[Device],
    f0: f64,
    cfg: &AssociationConfig,
) -> Result<AssociationResult> {
    if locations.is_empty() {
        return Err(Error::Empty("no locations to associate".into()));
    }
    let pairs = devices.len() * devices.len();
    if peaks.peaks.len() != pairs {
        return Err(Error::LengthMismatch {
            expected: pairs,
            found: peaks.peaks.len(),
        });
    }
    let regressions = locations
        .iter()
        .map(|&x| VelocityRegression::at(devices, x, f0))
        .collect::<Result<Vec<_>>>()?;
    let space = TupleSpace::new(peaks, locations.len());
    let mut tuples = enumerate_tuples(&space, &regressions, peaks.resolution, cfg)?;
    if tuples.len() < locations.len() {
        log::warn!("prefilter left {} tuples for {} targets; using all", tuples.len(), locations.len());
        tuples = enumerate_tuples(&space, &regressions, peaks.resolution, &AssociationConfig { prefilter: false, ..cfg.clone() })?;
    }
    let cols = locations.len();
    let entries: Vec<(f64, Vec2)> = tuples
        .par_iter()
        .map_init(
            || vec![0.0; pairs],
            |f, &p| {
                space.tuple(p, f);
                regressions
                    .iter()
                    .map(|u| {
                        let (c, v) = u.cost(f);
                        (c, v.unwrap_or(Vec2::new(f64::NAN, f64::NAN)))
                    })
                    .collect::<Vec<_>>()
            },
        )
        .flatten()
        .collect();
    let costs = CostMatrix::new(tuples.len(), cols, entries.iter().map(|e| e.0).collect())?;
    let fitted: Vec<Vec2> = entries.iter().map(|e| e.1).collect();
    let assignment = solve_assignment(&costs)?;
    let mut velocities = Vec::with_capacity(cols);
    let mut resolutions = Vec::with_capacity(cols);
    for (q, &row) in assignment.iter().enumerate() {
        velocities.push(fitted[row * cols + q]);
        resolutions.push(velocity_resolution(locations[q], devices, f0, peaks.resolution)?);
    }
    Ok(AssociationResult {
        space,
        tuples,
        costs,
        fitted,
        assignment,
        locations: locations.to_vec(),
        velocities,
        resolutions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::DopplerPeak;
    use crate::geometry::SPEED_OF_LIGHT;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const F0: f64 = 26.5e9;

    fn devices(xs: &[f64]) -> Vec<Device> {
        xs.iter()
            .map(|&x| Device::half_wavelength(Vec2::new(x, 0.0), 0.0, 32, F0))
            .collect()
    }

    fn peak_set(freqs: Vec<Vec<f64>>, resolution: f64) -> DopplerPeakSet {
        let peaks: Vec<Vec<DopplerPeak>> = freqs
            .into_iter()
            .map(|l| l.into_iter().map(|f| DopplerPeak { frequency: f, magnitude: 1.0 }).collect())
            .collect();
        let counts: Vec<usize> = peaks.iter().map(Vec::len).collect();
        DopplerPeakSet {
            count: crate::detection::estimate_target_count(&counts),
            peaks,
            resolution,
        }
    }

    #[test]
    fn consistent_tuple_has_zero_cost() {
        let devs = devices(&[-1.5, 0.0, 1.5]);
        let x = Vec2::new(1.0, 5.0);
        let v = Vec2::new(-0.7, 2.2);
        let u = VelocityRegression::at(&devs, x, F0).unwrap();
        let f = u.predict(v);
        let (c, est) = association_cost(&f, x, &devs, F0).unwrap();
        assert!(c < 1e-16 * f.iter().map(|v| v * v).sum::<f64>());
        let est = est.unwrap();
        assert!((est - v).norm() < 1e-10);
    }

    #[test]
    fn rank_deficient_cost_is_infinite() {
        let devs = devices(&[0.0]);
        let (c, v) = association_cost(&[10.0], Vec2::new(0.0, 5.0), &devs, F0).unwrap();
        assert!(c.is_infinite() && v.is_none());
        assert!(velocity_resolution(Vec2::new(0.0, 5.0), &devs, F0, 31.25).is_err());
    }

    #[test]
    fn table_example_velocities() {
        // The table lists shifts with the opposite sign convention.
        let devs = devices(&[-1.5, 1.5]);
        let rows: [([f64; 4], Vec2, Vec2); 2] = [
            ([-483.0, -512.0, -512.0, -542.0], Vec2::new(1.06, 5.0), Vec2::new(0.03, 3.08)),
            ([322.0, 342.0, 342.0, 361.0], Vec2::new(1.12, 4.91), Vec2::new(-0.05, -2.05)),
        ];
        for (f, x, v) in rows {
            let f: Vec<f64> = f.iter().map(|v| -v).collect();
            let (_, est) = association_cost(&f, x, &devs, F0).unwrap();
            let est = est.unwrap();
            assert!((est.x - v.x).abs() < 0.05 && (est.y - v.y).abs() < 0.01, "{est:?} vs {v:?}");
        }
    }

    #[test]
    fn tuple_counts() {
        let set = peak_set(vec![vec![1.0, 2.0]; 4], 31.25);
        let space = TupleSpace::new(&set, 2);
        assert_eq!(space.size(), 16.0);
        let all = enumerate_tuples(&space, &[], 31.25, &AssociationConfig::default()).unwrap();
        assert_eq!(all.len(), 16);
        assert_eq!(space.frequencies(1), vec![1.0, 1.0, 1.0, 2.0]);
        let single = TupleSpace::new(&peak_set(vec![vec![1.0, 2.0, 3.0]], 31.25), 3);
        assert_eq!(single.size(), 3.0);
        let big = TupleSpace::new(&peak_set(vec![vec![1.0, 2.0, 3.0]; 16], 31.25), 3);
        assert!(matches!(
            enumerate_tuples(&big, &[], 31.25, &AssociationConfig::default()),
            Err(Error::TupleCapExceeded { .. })
        ));
    }

    #[test]
    fn padding_fills_short_pairs() {
        let set = peak_set(vec![vec![50.0], vec![10.0, -20.0, 30.0]], 31.25);
        let space = TupleSpace::new(&set, 2);
        assert_eq!(space.candidates[0], vec![0.0, 50.0]);
        assert_eq!(space.padded[0], vec![true, false]);
        assert_eq!(space.candidates[1].len(), 2);
    }

    #[test]
    fn velocity_resolution_of_wide_aperture() {
        // Four devices evenly spread over 3 m, target at [1, 5], K T = 32 ms.
        let dv = velocity_resolution(Vec2::new(1.0, 5.0), &devices(&[-1.5, -0.5, 0.5, 1.5]), F0, 31.25).unwrap();
        assert!((dv.y - 0.1778).abs() < 5e-4, "{dv:?}");
        assert!((dv.x - 0.0319).abs() < 0.03 * 0.0319, "{dv:?}");
    }

    #[test]
    fn velocity_resolution_matches_pinv_oracle() {
        // Hand pseudo-inverse on the 9 x 2 regression matrix.
        let devs = devices(&[-1.5, 0.0, 1.5]);
        let x = Vec2::new(1.0, 5.0);
        let k = F0 / SPEED_OF_LIGHT;
        let mut ata = [0.0; 4];
        let mut at1 = [0.0; 2];
        for a in &devs {
            for b in &devs {
                let ua = (x - a.position) * (1.0 / (x - a.position).norm());
                let ub = (x - b.position) * (1.0 / (x - b.position).norm());
                let r = (ua + ub) * k;
                ata[0] += r.x * r.x;
                ata[1] += r.x * r.y;
                ata[3] += r.y * r.y;
                at1[0] += r.x;
                at1[1] += r.y;
            }
        }
        let det = ata[0] * ata[3] - ata[1] * ata[1];
        let vx = (ata[3] * at1[0] - ata[1] * at1[1]) / det * 31.25;
        let vy = (ata[0] * at1[1] - ata[1] * at1[0]) / det * 31.25;
        let dv = velocity_resolution(x, &devs, F0, 31.25).unwrap();
        assert_relative_eq!(dv.x, vx.abs(), max_relative = 1e-9);
        assert_relative_eq!(dv.y, vy.abs(), max_relative = 1e-9);
        let half = velocity_resolution(x, &devs, F0, 15.625).unwrap();
        assert_relative_eq!(half.x, 0.5 * dv.x, max_relative = 1e-12);
    }

    #[test]
    fn associates_two_targets() {
        let devs = devices(&[-1.5, 1.5]);
        // Far apart, so each tuple fits only its own location.
        let xs = [Vec2::new(-2.0, 3.0), Vec2::new(2.5, 4.0)];
        let vs = [Vec2::new(0.0, 3.0), Vec2::new(2.0, -1.0)];
        let freqs: Vec<Vec<f64>> = (0..4)
            .map(|p| {
                let (n, m) = (p / 2, p % 2);
                xs.iter()
                    .zip(&vs)
                    .map(|(&x, &v)| crate::geometry::doppler_shift(&devs[n], &devs[m], x, v, F0).unwrap())
                    .collect()
            })
            .collect();
        let r = associate(&peak_set(freqs, 31.25), &xs, &devs, F0, &AssociationConfig::default()).unwrap();
        assert_eq!(r.tuples.len(), 16);
        for q in 0..2 {
            assert!((r.velocities[q] - vs[q]).norm() < 1e-9, "{:?} {:?} {}", r.velocities[q], vs[q], r.total_cost());
        }
        let filtered = associate(
            &peak_set(
                (0..4).map(|p| r.space.candidates[p].clone()).collect(),
                31.25,
            ),
            &xs,
            &devs,
            F0,
            &AssociationConfig { prefilter: true, ..Default::default() },
        )
        .unwrap();
        assert!(filtered.tuples.len() <= 16);
        assert_eq!(filtered.velocities, r.velocities);
        assert!(r.table_csv(4).lines().count() == 5);
    }

    proptest! {
        #[test]
        fn cost_invariant_under_pair_permutation(seed in any::<u64>()) {
            use rand::{seq::SliceRandom, Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let devs = devices(&[-1.5, -0.5, 1.5]);
            let x = Vec2::new(rng.gen_range(-1.0..1.0), rng.gen_range(3.0..6.0));
            let u = VelocityRegression::at(&devs, x, F0).unwrap();
            let f: Vec<f64> = (0..9).map(|_| rng.gen_range(-500.0..500.0)).collect();
            let (c, v) = u.cost(&f);
            let mut order: Vec<usize> = (0..9).collect();
            order.shuffle(&mut rng);
            let p = VelocityRegression::from_rows(order.iter().map(|&i| u.rows[i]).collect());
            let fp: Vec<f64> = order.iter().map(|&i| f[i]).collect();
            let (cp, vp) = p.cost(&fp);
            prop_assert!((c - cp).abs() <= 1e-9 * (1.0 + c));
            prop_assert!((v.unwrap() - vp.unwrap()).norm() <= 1e-9);
        }

        #[test]
        fn prefilter_never_drops_the_optimum(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let devs = devices(&[-1.5, 1.5]);
            let xs = [Vec2::new(rng.gen_range(-1.0..1.0), 5.0), Vec2::new(rng.gen_range(-1.0..1.0), 4.5)];
            let vs = [Vec2::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)), Vec2::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0))];
            let freqs: Vec<Vec<f64>> = (0..4)
                .map(|p| {
                    let (n, m) = (p / 2, p % 2);
                    xs.iter().zip(&vs).map(|(&x, &v)| crate::geometry::doppler_shift(&devs[n], &devs[m], x, v, F0).unwrap() + rng.gen_range(-3.0..3.0)).collect()
                })
                .collect();
            let set = peak_set(freqs, 31.25);
            let all = associate(&set, &xs, &devs, F0, &AssociationConfig::default()).unwrap();
            let filt = associate(&set, &xs, &devs, F0, &AssociationConfig { prefilter: true, ..Default::default() }).unwrap();
            prop_assert!((all.total_cost() - filt.total_cost()).abs() <= 1e-9 * (1.0 + all.total_cost()));
        }
    }
}
