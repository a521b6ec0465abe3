//! Scene description and propagation geometry.
//!
//! Devices carry a uniform linear array whose element `l` sits at
//! `p + l * d * [cos(psi), sin(psi)]`; element 0 is the phase reference.
//! All quantities are SI, angles in radians.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_polar(radius: f64, angle: f64) -> Self {
        Self::new(radius * angle.cos(), radius * angle.sin())
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Unit vector along `self`, `None` for the zero vector.
    pub fn normalized(self) -> Option<Vec2> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| self * (1.0 / n))
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, rhs: Vec2) {
        self.x += rhs.x;
        self.y += rhs.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// A sensing device with a ULA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub position: Vec2,
    /// Array axis orientation in radians.
    pub orientation: f64,
    pub antenna_count: usize,
    /// Inter-element spacing in metres.
    pub antenna_spacing: f64,
}

impl Device {
    pub fn new(
        position: Vec2,
        orientation: f64,
        antenna_count: usize,
        antenna_spacing: f64,
    ) -> Result<Self> {
        let device = Self {
            position,
            orientation,
            antenna_count,
            antenna_spacing,
        };
        device.validate()?;
        Ok(device)
    }

    /// Device with half-wavelength spacing at carrier `f0`.
    pub fn half_wavelength(position: Vec2, orientation: f64, antenna_count: usize, f0: f64) -> Self {
        Self {
            position,
            orientation,
            antenna_count,
            antenna_spacing: 0.5 * SPEED_OF_LIGHT / f0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.antenna_count == 0 {
            return Err(Error::Config("antenna_count must be at least 1".into()));
        }
        if !(self.antenna_spacing > 0.0 && self.antenna_spacing.is_finite()) {
            return Err(Error::Config("antenna_spacing must be positive".into()));
        }
        if !self.position.is_finite() || !self.orientation.is_finite() {
            return Err(Error::Config("device pose must be finite".into()));
        }
        Ok(())
    }

    pub fn axis(&self) -> Vec2 {
        Vec2::new(self.orientation.cos(), self.orientation.sin())
    }

    pub fn antenna_position(&self, l: usize) -> Vec2 {
        self.position + self.axis() * (l as f64 * self.antenna_spacing)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub position: Vec2,
    pub velocity: Vec2,
    /// Radar cross section in square metres.
    pub rcs: f64,
    /// Scattering phase in radians, shared by every device pair.
    pub scattering_phase: f64,
}

impl Target {
    pub fn validate(&self) -> Result<()> {
        if !(self.rcs >= 0.0 && self.rcs.is_finite()) {
            return Err(Error::Config("target rcs must be non-negative".into()));
        }
        if !self.position.is_finite() || !self.velocity.is_finite() {
            return Err(Error::Config("target state must be finite".into()));
        }
        Ok(())
    }
}

/// OFDM pilot waveform shared by every device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub carrier_frequency: f64,
    pub bandwidth: f64,
    pub subcarrier_count: usize,
    pub device_count: usize,
    /// Preamble repetition interval `T` in seconds.
    pub repetition_interval: f64,
    pub slow_time_count: usize,
    pub pilot_power: f64,
}

impl Waveform {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.carrier_frequency) || !positive(self.bandwidth) {
            return Err(Error::Config("carrier and bandwidth must be positive".into()));
        }
        if self.subcarrier_count == 0 || self.device_count == 0 || self.slow_time_count == 0 {
            return Err(Error::Config(
                "subcarrier, device and slow-time counts must be positive".into(),
            ));
        }
        if self.device_count > self.subcarrier_count {
            return Err(Error::Config("more devices than subcarriers".into()));
        }
        if !positive(self.pilot_power) {
            return Err(Error::Config("pilot power must be positive".into()));
        }
        if !(self.repetition_interval > self.symbol_duration()) {
            return Err(Error::Config(
                "repetition interval must exceed the OFDM symbol duration".into(),
            ));
        }
        Ok(())
    }

    pub fn subcarrier_spacing(&self) -> f64 {
        self.bandwidth / self.subcarrier_count as f64
    }

    pub fn symbol_duration(&self) -> f64 {
        1.0 / self.subcarrier_spacing()
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_frequency
    }

    /// Doppler resolution `1 / (K T)`.
    pub fn doppler_resolution(&self) -> f64 {
        1.0 / (self.slow_time_count as f64 * self.repetition_interval)
    }

    /// Subcarriers used by the 0-based device `n`: every `N`-th one starting at `n`.
    pub fn pilot_subcarriers(&self, n: usize) -> Vec<usize> {
        (n..self.subcarrier_count)
            .step_by(self.device_count)
            .collect()
    }

    /// Baseband frequency of logical subcarrier `i`; the band is centred on the carrier.
    pub fn subcarrier_frequency(&self, i: usize) -> f64 {
        (i as f64 - (self.subcarrier_count / 2) as f64) * self.subcarrier_spacing()
    }
}

/// Which end of a link a steering vector describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrayRole {
    Tx,
    Rx,
}

/// Unit vectors from the device towards `point` (Tx role) and from `point`
/// back to the device (Rx role).
pub fn unit_vectors(device: &Device, point: Vec2) -> Result<(Vec2, Vec2)> {
    let u_tx = (point - device.position).normalized().ok_or_else(|| {
        Error::DegenerateGeometry(format!(
            "point ({}, {}) coincides with a device",
            point.x, point.y
        ))
    })?;
    Ok((u_tx, -u_tx))
}

/// Bistatic time of flight at time `t` for a point moving with `velocity`.
pub fn tof(tx: &Device, rx: &Device, point: Vec2, velocity: Vec2, t: f64) -> f64 {
    let x = point + velocity * t;
    ((x - tx.position).norm() + (rx.position - x).norm()) / SPEED_OF_LIGHT
}

/// Direct-path time of flight between two devices.
pub fn los_tof(tx: &Device, rx: &Device) -> f64 {
    tx.position.distance(rx.position) / SPEED_OF_LIGHT
}

/// Row of the velocity regression matrix: `(f0/c) (u_tx - u_rx)`.
pub fn doppler_gradient(tx: &Device, rx: &Device, point: Vec2, f0: f64) -> Result<Vec2> {
    let (u_n, _) = unit_vectors(tx, point)?;
    let (_, u_m) = unit_vectors(rx, point)?;
    Ok((u_n - u_m) * (f0 / SPEED_OF_LIGHT))
}

/// Doppler shift of a scatterer at `point` moving with `velocity`.
///
/// The slow-time phase of the echo evolves as `exp(-j 2 pi f_D k T)`.
pub fn doppler_shift(tx: &Device, rx: &Device, point: Vec2, velocity: Vec2, f0: f64) -> Result<f64> {
    Ok(doppler_gradient(tx, rx, point, f0)?.dot(velocity))
}

/// Two-way free-space scattering amplitude including the target RCS.
pub fn amplitude(tx: &Device, rx: &Device, target: &Target, f0: f64) -> Result<f64> {
    let d_tx = target.position.distance(tx.position);
    let d_rx = rx.position.distance(target.position);
    if d_tx == 0.0 || d_rx == 0.0 {
        return Err(Error::DegenerateGeometry(
            "target coincides with a device".into(),
        ));
    }
    let lambda = SPEED_OF_LIGHT / f0;
    Ok((lambda * lambda * target.rcs / ((4.0 * PI).powi(3) * d_tx * d_tx * d_rx * d_rx)).sqrt())
}

/// Array response for a plane wave whose direction is `u`.
pub fn steering_from_direction(device: &Device, u: Vec2, f0: f64) -> Vec<Complex64> {
    let k = 2.0 * PI * f0 / SPEED_OF_LIGHT;
    let phase_step = k * device.antenna_spacing * device.axis().dot(u);
    (0..device.antenna_count)
        .map(|l| Complex64::from_polar(1.0, -phase_step * l as f64))
        .collect()
}

pub fn steering_vector(device: &Device, point: Vec2, f0: f64, role: ArrayRole) -> Result<Vec<Complex64>> {
    let (u_tx, u_rx) = unit_vectors(device, point)?;
    let u = match role {
        ArrayRole::Tx => u_tx,
        ArrayRole::Rx => u_rx,
    };
    Ok(steering_from_direction(device, u, f0))
}

/// Matched Tx weights towards `focus`, unit norm.
///
/// The gain towards a point is `a^H b` with `a` the Tx steering vector, so the
/// matched weights equal the steering vector itself scaled by `1/sqrt(L)`.
pub fn tx_beamformer(device: &Device, focus: Vec2, f0: f64) -> Result<Vec<Complex64>> {
    let a = steering_vector(device, focus, f0, ArrayRole::Tx)?;
    let scale = 1.0 / (a.len() as f64).sqrt();
    Ok(a.into_iter().map(|v| v * scale).collect())
}

/// `a^H b`.
pub fn beam_gain(steering: &[Complex64], weights: &[Complex64]) -> Complex64 {
    steering
        .iter()
        .zip(weights)
        .map(|(a, b)| a.conj() * b)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const F0: f64 = 26.5e9;

    fn dev(x: f64, y: f64) -> Device {
        Device::half_wavelength(Vec2::new(x, y), 0.0, 32, F0)
    }

    #[test]
    fn unit_vectors_axis_aligned() {
        let (u_tx, u_rx) = unit_vectors(&dev(0.0, 0.0), Vec2::new(0.0, 5.0)).unwrap();
        assert_eq!(u_tx, Vec2::new(0.0, 1.0));
        assert_eq!(u_rx, Vec2::new(0.0, -1.0));
    }

    #[test]
    fn unit_vectors_oblique() {
        let (u_tx, u_rx) = unit_vectors(&dev(-1.5, 0.0), Vec2::new(1.0, 5.0)).unwrap();
        assert_relative_eq!(u_tx.x, 0.4472, epsilon = 1e-4);
        assert_relative_eq!(u_tx.y, 0.8944, epsilon = 1e-4);
        assert_relative_eq!(u_rx.x, -0.4472, epsilon = 1e-4);
        assert_relative_eq!(u_rx.y, -0.8944, epsilon = 1e-4);
    }

    #[test]
    fn unit_vectors_degenerate() {
        let d = dev(1.0, 2.0);
        assert!(matches!(
            unit_vectors(&d, d.position),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn tof_examples() {
        let mono = dev(0.0, 0.0);
        let t = tof(&mono, &mono, Vec2::new(0.0, 5.0), Vec2::ZERO, 0.0);
        assert_relative_eq!(t, 10.0 / SPEED_OF_LIGHT, max_relative = 1e-15);
        assert_relative_eq!(t * 1e9, 33.356, epsilon = 1e-3);

        let (a, b) = (dev(-1.5, 0.0), dev(1.5, 0.0));
        assert_relative_eq!(los_tof(&a, &b) * 1e9, 10.007, epsilon = 1e-3);
        assert_relative_eq!(
            tof(&a, &b, b.position, Vec2::ZERO, 0.0),
            los_tof(&a, &b),
            max_relative = 1e-15
        );
        let t = tof(&a, &b, Vec2::new(1.0, 5.0), Vec2::ZERO, 0.0);
        assert_relative_eq!(t * 1e9, 35.408, epsilon = 1e-3);
    }

    #[test]
    fn doppler_examples() {
        let mono = dev(0.0, 0.0);
        let p = Vec2::new(0.0, 5.0);
        assert_eq!(doppler_shift(&mono, &mono, p, Vec2::ZERO, F0).unwrap(), 0.0);
        let f = doppler_shift(&mono, &mono, p, Vec2::new(0.0, 3.0), F0).unwrap();
        assert_relative_eq!(f, 530.37, epsilon = 0.01);

        let m = dev(-1.5, 0.0);
        let f = doppler_shift(&m, &m, Vec2::new(1.0, 5.0), Vec2::new(0.0, 3.0), F0).unwrap();
        assert_relative_eq!(f.abs(), 474.4, epsilon = 0.05);
    }

    #[test]
    fn amplitude_examples() {
        let mono = dev(0.0, 0.0);
        let mut t = Target {
            position: Vec2::new(0.0, 5.0),
            velocity: Vec2::ZERO,
            rcs: 1.0,
            scattering_phase: 0.0,
        };
        let a5 = amplitude(&mono, &mono, &t, F0).unwrap();
        assert_relative_eq!(a5, 1.016e-5, max_relative = 1e-3);
        t.position = Vec2::new(0.0, 10.0);
        let a10 = amplitude(&mono, &mono, &t, F0).unwrap();
        assert_relative_eq!(a10, a5 / 4.0, max_relative = 1e-12);
        t.rcs = 0.0;
        assert_eq!(amplitude(&mono, &mono, &t, F0).unwrap(), 0.0);
    }

    #[test]
    fn steering_single_antenna_and_broadside() {
        let single = Device::half_wavelength(Vec2::ZERO, 0.3, 1, F0);
        let a = steering_vector(&single, Vec2::new(3.0, 4.0), F0, ArrayRole::Rx).unwrap();
        assert_eq!(a, vec![Complex64::new(1.0, 0.0)]);

        let d = dev(0.0, 0.0);
        let a = steering_vector(&d, Vec2::new(0.0, 5.0), F0, ArrayRole::Tx).unwrap();
        for v in a {
            assert_relative_eq!(v.re, 1.0, epsilon = 1e-15);
            assert_relative_eq!(v.im, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn steering_thirty_degrees_off_broadside() {
        let d = dev(0.0, 0.0);
        let phi = 30f64.to_radians();
        let point = Vec2::new(5.0 * phi.sin(), 5.0 * phi.cos());
        let a = steering_vector(&d, point, F0, ArrayRole::Rx).unwrap();
        // Element l sits at l * lambda/2 along x; the arriving wave travels along
        // -[sin phi, cos phi], so the relative phase is +pi * l * sin(phi).
        for (l, v) in a.iter().enumerate() {
            let expected = Complex64::from_polar(1.0, PI * l as f64 * 0.5);
            assert!((v - expected).norm() < 1e-9, "element {l}");
        }
    }

    #[test]
    fn beamformer_gain() {
        let single = Device::half_wavelength(Vec2::ZERO, 0.0, 1, F0);
        let b = tx_beamformer(&single, Vec2::new(1.0, 5.0), F0).unwrap();
        let a = steering_vector(&single, Vec2::new(-2.0, 3.0), F0, ArrayRole::Tx).unwrap();
        assert_relative_eq!(beam_gain(&a, &b).norm(), 1.0, epsilon = 1e-12);

        let d = dev(-1.5, 0.0);
        let focus = Vec2::new(1.0, 5.0);
        let b = tx_beamformer(&d, focus, F0).unwrap();
        let norm: f64 = b.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        assert_relative_eq!(norm, 1.0, epsilon = 1e-12);
        let a = steering_vector(&d, focus, F0, ArrayRole::Tx).unwrap();
        assert_relative_eq!(beam_gain(&a, &b).norm(), 32f64.sqrt(), epsilon = 1e-10);

        // Far off the beam: compare with an explicit sum of 32 unit phasors.
        let off = Vec2::new(-4.0, 1.0);
        let a = steering_vector(&d, off, F0, ArrayRole::Tx).unwrap();
        let gain = beam_gain(&a, &b).norm();
        let k = 2.0 * PI * F0 / SPEED_OF_LIGHT;
        let spacing = d.antenna_spacing;
        let u_focus = (focus - d.position).normalized().unwrap().x;
        let u_off = (off - d.position).normalized().unwrap().x;
        let mut brute = Complex64::new(0.0, 0.0);
        for l in 0..32 {
            let pos = l as f64 * spacing;
            brute += Complex64::from_polar(1.0, k * pos * u_off - k * pos * u_focus);
        }
        assert_relative_eq!(gain, brute.norm() / 32f64.sqrt(), epsilon = 1e-9);
        assert!(gain < 0.2 * 32f64.sqrt());
    }

    fn finite_point() -> impl Strategy<Value = Vec2> {
        (-20.0..20.0f64, -20.0..20.0f64).prop_map(|(x, y)| Vec2::new(x, y))
    }

    proptest! {
        #[test]
        fn unit_vectors_have_unit_norm(p in finite_point(), q in finite_point()) {
            prop_assume!(p.distance(q) > 1e-6);
            let d = Device::half_wavelength(p, 0.0, 4, F0);
            let (u_tx, u_rx) = unit_vectors(&d, q).unwrap();
            prop_assert!((u_tx.norm() - 1.0).abs() < 1e-12);
            prop_assert!((u_rx.norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn tof_is_reciprocal(a in finite_point(), b in finite_point(), x in finite_point(),
                             v in finite_point(), t in 0.0..0.1f64) {
            let (da, db) = (dev(a.x, a.y), dev(b.x, b.y));
            let t1 = tof(&da, &db, x, v, t);
            let t2 = tof(&db, &da, x, v, t);
            prop_assert!((t1 - t2).abs() <= 1e-12 * t1.abs().max(1e-12));
        }

        #[test]
        fn doppler_is_linear_in_velocity(a in finite_point(), b in finite_point(),
                                         x in finite_point(), v in finite_point(),
                                         alpha in -5.0..5.0f64) {
            prop_assume!(x.distance(a) > 1e-3 && x.distance(b) > 1e-3);
            let (da, db) = (dev(a.x, a.y), dev(b.x, b.y));
            let f1 = doppler_shift(&da, &db, x, v * alpha, F0).unwrap();
            let f2 = alpha * doppler_shift(&da, &db, x, v, F0).unwrap();
            prop_assert!((f1 - f2).abs() <= 1e-9 * (1.0 + f2.abs()));
        }

        #[test]
        fn monostatic_doppler_is_twice_projection(a in finite_point(), x in finite_point(),
                                                 v in finite_point()) {
            prop_assume!(x.distance(a) > 1e-3);
            let d = dev(a.x, a.y);
            let (u_tx, _) = unit_vectors(&d, x).unwrap();
            let f = doppler_shift(&d, &d, x, v, F0).unwrap();
            let expected = 2.0 * F0 / SPEED_OF_LIGHT * u_tx.dot(v);
            prop_assert!((f - expected).abs() <= 1e-9 * (1.0 + expected.abs()));
        }

        #[test]
        fn steering_is_unit_modulus(p in finite_point(), x in finite_point(),
                                    psi in -3.0..3.0f64, l in 1usize..40) {
            prop_assume!(p.distance(x) > 1e-3);
            let d = Device::half_wavelength(p, psi, l, F0);
            let a = steering_vector(&d, x, F0, ArrayRole::Rx).unwrap();
            prop_assert_eq!(a.len(), l);
            prop_assert!((a[0] - Complex64::new(1.0, 0.0)).norm() < 1e-15);
            for v in a {
                prop_assert!((v.norm() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn amplitude_scales_with_sqrt_rcs(rcs in 0.0..10.0f64, scale in 0.1..10.0f64) {
            let (a, b) = (dev(-1.0, 0.0), dev(1.0, 0.0));
            let mut t = Target { position: Vec2::new(0.3, 4.0), velocity: Vec2::ZERO,
                                 rcs, scattering_phase: 0.0 };
            let base = amplitude(&a, &b, &t, F0).unwrap();
            t.rcs = rcs * scale;
            let scaled = amplitude(&a, &b, &t, F0).unwrap();
            prop_assert!((scaled - base * scale.sqrt()).abs() <= 1e-12 * (1.0 + scaled));
        }
    }
}
