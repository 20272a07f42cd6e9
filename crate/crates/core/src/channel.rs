//! Spectrum-sharing uplink channel.
//!
//! Large-scale fading follows a log-distance path loss with log-normal
//! shadowing and is redrawn every FL round. Small-scale fading is a
//! tapped-delay-line sum over `n_c` equal-power clusters with exponential
//! delays; tap coefficients are redrawn every slot, so the gain fluctuates
//! per slot and, through the cluster delays, across sub-bands.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::Action;
use crate::error::{ensure_finite, Error, Result};
use crate::rng::SimRng;

/// Clients closer than this are redrawn; the path-loss model is not meant
/// for the near field of the antenna.
pub const MIN_CLIENT_DISTANCE_M: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryConfig {
    pub clients: usize,
    pub cell_side_m: f64,
}

/// Base station at the center of a flat-topped hexagonal cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellGeometry {
    pub bs_position: Point,
    pub client_positions: Vec<Point>,
    pub cell_side_m: f64,
}

impl CellGeometry {
    pub fn distances(&self) -> Vec<f64> {
        self.client_positions
            .iter()
            .map(|p| p.distance(&self.bs_position))
            .collect()
    }
}

/// Containment test for a flat-topped hexagon centered at the origin with
/// circumradius `side`.
pub fn in_hexagon(x: f64, y: f64, side: f64) -> bool {
    let s3 = 3f64.sqrt();
    y.abs() <= s3 / 2.0 * side && s3 * x.abs() + y.abs() <= s3 * side
}

/// Draws client positions uniformly over the hexagonal cell by rejection
/// from the bounding box.
pub fn sample_client_positions(seed: u64, config: &GeometryConfig) -> Result<CellGeometry> {
    if config.clients == 0 {
        return Err(Error::Config("client count must be at least 1".into()));
    }
    if !(config.cell_side_m.is_finite() && config.cell_side_m > MIN_CLIENT_DISTANCE_M) {
        return Err(Error::Config(format!(
            "cell side must exceed {MIN_CLIENT_DISTANCE_M} m, got {}",
            config.cell_side_m
        )));
    }
    let side = config.cell_side_m;
    let half_height = 3f64.sqrt() / 2.0 * side;
    let mut rng = crate::rng::seeded(seed);
    let mut positions = Vec::with_capacity(config.clients);
    while positions.len() < config.clients {
        let x = rng.random_range(-side..=side);
        let y = rng.random_range(-half_height..=half_height);
        if in_hexagon(x, y, side) && x.hypot(y) > MIN_CLIENT_DISTANCE_M {
            positions.push(Point { x, y });
        }
    }
    Ok(CellGeometry {
        bs_position: Point { x: 0.0, y: 0.0 },
        client_positions: positions,
        cell_side_m: side,
    })
}

/// Path loss in dB at `distance_m`: 128.1 + 37.6 log10(d_km).
pub fn path_loss_db(distance_m: f64) -> Result<f64> {
    if !(distance_m.is_finite() && distance_m > 0.0) {
        return Err(Error::Domain(format!(
            "distance must be positive and finite, got {distance_m}"
        )));
    }
    Ok(128.1 + 37.6 * (distance_m / 1000.0).log10())
}

/// Linear large-scale power gain for a distance and a shadowing draw in dB.
pub fn compute_large_scale(distance_m: f64, shadowing_db: f64) -> Result<f64> {
    if !shadowing_db.is_finite() {
        return Err(Error::Domain(format!(
            "shadowing draw must be finite, got {shadowing_db}"
        )));
    }
    let pl = path_loss_db(distance_m)?;
    Ok(db_to_linear(-(pl + shadowing_db)))
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

/// Thermal noise power over `bandwidth_hz` with the given noise figure.
pub fn noise_power_watts(bandwidth_hz: f64, noise_figure_db: f64) -> f64 {
    dbm_to_watts(-174.0 + linear_to_db(bandwidth_hz) + noise_figure_db)
}

/// Uplink resources shared by all clients.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkBudget {
    pub bandwidth_hz: f64,
    pub noise_power_w: f64,
    /// Strictly decreasing transmit powers; the last entry is the null level.
    pub power_levels_w: Vec<f64>,
    pub subbands: usize,
    pub slot_duration_s: f64,
    pub slots_per_round: usize,
    pub payload_bits: f64,
}

impl LinkBudget {
    pub fn new(
        bandwidth_hz: f64,
        noise_power_w: f64,
        power_levels_w: Vec<f64>,
        subbands: usize,
        slot_duration_s: f64,
        slots_per_round: usize,
        payload_bits: f64,
    ) -> Result<Self> {
        let budget = Self {
            bandwidth_hz,
            noise_power_w,
            power_levels_w,
            subbands,
            slot_duration_s,
            slots_per_round,
            payload_bits,
        };
        budget.validate()?;
        Ok(budget)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("bandwidth", self.bandwidth_hz)?;
        positive("noise power", self.noise_power_w)?;
        positive("slot duration", self.slot_duration_s)?;
        positive("payload", self.payload_bits)?;
        if self.subbands == 0 {
            return Err(Error::Config("at least one sub-band is required".into()));
        }
        if self.slots_per_round == 0 {
            return Err(Error::Config("at least one slot per round is required".into()));
        }
        if self.power_levels_w.len() < 2 {
            return Err(Error::Config(
                "power levels need at least one active level and the null level".into(),
            ));
        }
        if self.power_levels_w.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config("power levels must be finite and nonnegative".into()));
        }
        if self.power_levels_w.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config("power levels must be strictly decreasing".into()));
        }
        Ok(())
    }

    pub fn power_level_count(&self) -> usize {
        self.power_levels_w.len()
    }

    pub fn null_power_index(&self) -> usize {
        self.power_levels_w.len() - 1
    }

    pub fn max_power_index(&self) -> usize {
        0
    }

    /// Actual radiated power for a level; the null level transmits nothing.
    pub fn transmit_power(&self, power_index: usize) -> f64 {
        if power_index >= self.null_power_index() {
            0.0
        } else {
            self.power_levels_w[power_index]
        }
    }

    /// Per-slot capacity sum a client must reach to deliver the payload.
    pub fn required_capacity_sum(&self) -> f64 {
        self.payload_bits / self.slot_duration_s
    }

    pub fn action_count(&self) -> usize {
        self.subbands * self.power_level_count()
    }
}

/// Multipath cluster layout of one link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProfile {
    pub delays_s: Vec<f64>,
    pub powers: Vec<f64>,
}

impl ClusterProfile {
    pub fn new(delays_s: Vec<f64>, powers: Vec<f64>) -> Result<Self> {
        let profile = Self { delays_s, powers };
        profile.validate()?;
        Ok(profile)
    }

    /// Equal-power clusters with i.i.d. exponential delays.
    pub fn sample(cluster_count: usize, mean_delay_s: f64, rng: &mut SimRng) -> Result<Self> {
        if cluster_count == 0 {
            return Err(Error::Config("cluster count must be at least 1".into()));
        }
        if !(mean_delay_s.is_finite() && mean_delay_s > 0.0) {
            return Err(Error::Config(format!(
                "mean cluster delay must be positive, got {mean_delay_s}"
            )));
        }
        let exp = Exp::new(1.0 / mean_delay_s).map_err(|e| Error::Config(e.to_string()))?;
        let delays = (0..cluster_count).map(|_| exp.sample(rng)).collect();
        let powers = vec![1.0 / cluster_count as f64; cluster_count];
        Self::new(delays, powers)
    }

    pub fn cluster_count(&self) -> usize {
        self.delays_s.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.delays_s.is_empty() {
            return Err(Error::Config("cluster profile needs at least one cluster".into()));
        }
        if self.delays_s.len() != self.powers.len() {
            return Err(Error::Config("cluster delays and powers differ in length".into()));
        }
        if self.delays_s.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::Config("cluster delays must be finite and nonnegative".into()));
        }
        if self.powers.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config("cluster powers must be finite and nonnegative".into()));
        }
        let total: f64 = self.powers.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("cluster powers sum to {total}, expected 1")));
        }
        Ok(())
    }

    /// Per-cluster phasors `sqrt(p_k) exp(-j 2 pi f tau_k)` at one frequency.
    pub fn phasors(&self, frequency_hz: f64) -> Vec<Complex64> {
        self.delays_s
            .iter()
            .zip(&self.powers)
            .map(|(tau, p)| Complex64::from_polar(p.sqrt(), -2.0 * PI * frequency_hz * tau))
            .collect()
    }
}

fn standard_complex_gaussian(rng: &mut SimRng) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn combine(phasors: &[Complex64], rng: &mut SimRng) -> Complex64 {
    phasors
        .iter()
        .map(|ph| ph * standard_complex_gaussian(rng))
        .sum()
}

/// One small-scale draw `h = sum_k sqrt(p_k) g_k exp(-j 2 pi f tau_k)`.
pub fn sample_small_scale(
    profile: &ClusterProfile,
    subband_center_hz: f64,
    rng: &mut SimRng,
) -> Result<Complex64> {
    profile.validate()?;
    Ok(combine(&profile.phasors(subband_center_hz), rng))
}

/// Channel parameters that do not change within an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    pub cluster_count: usize,
    pub mean_cluster_delay_s: f64,
    pub shadowing_std_db: f64,
    pub carrier_hz: f64,
}

impl ChannelConfig {
    pub fn subband_center(&self, budget: &LinkBudget, subband: usize) -> f64 {
        self.carrier_hz + subband as f64 * budget.bandwidth_hz
    }
}

/// Per-round channel state: large-scale gains and the cluster phasors of
/// every (client, sub-band) link. Slots are drawn from it.
#[derive(Debug, Clone)]
pub struct RoundChannel {
    pub large_scale: Vec<f64>,
    pub profiles: Vec<ClusterProfile>,
    subbands: usize,
    phasors: Vec<Vec<Complex64>>,
}

impl RoundChannel {
    pub fn sample(
        geometry: &CellGeometry,
        config: &ChannelConfig,
        budget: &LinkBudget,
        rng: &mut SimRng,
    ) -> Result<Self> {
        let shadow = Normal::new(0.0, config.shadowing_std_db)
            .map_err(|e| Error::Config(format!("shadowing std: {e}")))?;
        let mut large_scale = Vec::with_capacity(geometry.client_positions.len());
        for d in geometry.distances() {
            large_scale.push(compute_large_scale(d, shadow.sample(rng))?);
        }
        let mut profiles = Vec::with_capacity(large_scale.len());
        for _ in 0..large_scale.len() {
            profiles.push(ClusterProfile::sample(
                config.cluster_count,
                config.mean_cluster_delay_s,
                rng,
            )?);
        }
        Self::from_parts(large_scale, profiles, config, budget)
    }

    pub fn from_parts(
        large_scale: Vec<f64>,
        profiles: Vec<ClusterProfile>,
        config: &ChannelConfig,
        budget: &LinkBudget,
    ) -> Result<Self> {
        if large_scale.len() != profiles.len() {
            return Err(Error::Shape("one cluster profile per client is required".into()));
        }
        for (n, a) in large_scale.iter().enumerate() {
            if !(a.is_finite() && *a > 0.0) {
                return Err(Error::Domain(format!("large-scale gain of client {n} is {a}")));
            }
        }
        let mut phasors = Vec::with_capacity(profiles.len() * budget.subbands);
        for profile in &profiles {
            profile.validate()?;
            for c in 0..budget.subbands {
                phasors.push(profile.phasors(config.subband_center(budget, c)));
            }
        }
        Ok(Self {
            large_scale,
            profiles,
            subbands: budget.subbands,
            phasors,
        })
    }

    pub fn clients(&self) -> usize {
        self.large_scale.len()
    }

    /// Draws `slots` fresh small-scale realizations.
    pub fn draw_slots(&self, slots: usize, rng: &mut SimRng) -> ChannelRealization {
        let clients = self.clients();
        let mut small_scale = Vec::with_capacity(slots * clients * self.subbands);
        for _ in 0..slots {
            for n in 0..clients {
                // cluster gains are common to all sub-bands; only the
                // delay phases differ with frequency
                let k = self.profiles[n].cluster_count();
                let g: Vec<Complex64> = (0..k).map(|_| standard_complex_gaussian(rng)).collect();
                for c in 0..self.subbands {
                    let h = self.phasors[n * self.subbands + c]
                        .iter()
                        .zip(&g)
                        .map(|(ph, gk)| ph * gk)
                        .sum();
                    small_scale.push(h);
                }
            }
        }
        ChannelRealization::new(self.large_scale.clone(), small_scale, slots, self.subbands)
            .expect("shapes are consistent by construction")
    }
}

/// Large-scale gains per client plus small-scale and composite gains per
/// (slot, client, sub-band).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    large_scale: Vec<f64>,
    small_scale: Vec<Complex64>,
    gain: Vec<f64>,
    slots: usize,
    subbands: usize,
}

impl ChannelRealization {
    pub fn new(
        large_scale: Vec<f64>,
        small_scale: Vec<Complex64>,
        slots: usize,
        subbands: usize,
    ) -> Result<Self> {
        if small_scale.len() != slots * large_scale.len() * subbands {
            return Err(Error::Shape(format!(
                "expected {} small-scale entries, got {}",
                slots * large_scale.len() * subbands,
                small_scale.len()
            )));
        }
        let clients = large_scale.len();
        let gain = small_scale
            .iter()
            .enumerate()
            .map(|(i, h)| large_scale[(i / subbands) % clients] * h.norm_sqr())
            .collect();
        Ok(Self {
            large_scale,
            small_scale,
            gain,
            slots,
            subbands,
        })
    }

    /// Builds a realization directly from composite power gains with unit
    /// large-scale fading. Handy for fixtures.
    pub fn from_gains(gains: Vec<f64>, clients: usize, subbands: usize) -> Result<Self> {
        if clients == 0 || subbands == 0 || !gains.len().is_multiple_of(clients * subbands) {
            return Err(Error::Shape("gain table does not tile (slot, client, sub-band)".into()));
        }
        let slots = gains.len() / (clients * subbands);
        let small = gains
            .iter()
            .map(|g| Complex64::new(g.sqrt(), 0.0))
            .collect();
        Self::new(vec![1.0; clients], small, slots, subbands)
    }

    fn index(&self, slot: usize, client: usize, subband: usize) -> usize {
        (slot * self.clients() + client) * self.subbands + subband
    }

    pub fn clients(&self) -> usize {
        self.large_scale.len()
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn subbands(&self) -> usize {
        self.subbands
    }

    pub fn large_scale(&self) -> &[f64] {
        &self.large_scale
    }

    pub fn small_scale(&self, slot: usize, client: usize, subband: usize) -> Complex64 {
        self.small_scale[self.index(slot, client, subband)]
    }

    pub fn gain(&self, slot: usize, client: usize, subband: usize) -> f64 {
        self.gain[self.index(slot, client, subband)]
    }

    /// Composite gains of every sub-band for one client in one slot.
    pub fn client_gains(&self, slot: usize, client: usize) -> &[f64] {
        let start = self.index(slot, client, 0);
        &self.gain[start..start + self.subbands]
    }

    /// Small-scale power gains `|h|^2` of every sub-band for one client.
    pub fn small_scale_power(&self, slot: usize, client: usize) -> Vec<f64> {
        let start = self.index(slot, client, 0);
        self.small_scale[start..start + self.subbands]
            .iter()
            .map(|h| h.norm_sqr())
            .collect()
    }

    /// Writes `(round, slot, client, subband, gain_linear)` rows.
    pub fn write_trace_csv<W: Write>(
        &self,
        round: usize,
        writer: &mut csv::Writer<W>,
    ) -> Result<()> {
        for s in 0..self.slots {
            for n in 0..self.clients() {
                for c in 0..self.subbands {
                    writer.write_record([
                        round.to_string(),
                        s.to_string(),
                        n.to_string(),
                        c.to_string(),
                        format!("{:e}", self.gain(s, n, c)),
                    ])?;
                }
            }
        }
        Ok(())
    }
}

pub const TRACE_HEADER: [&str; 5] = ["round", "slot", "client", "subband", "gain_linear"];

/// Uplink SINR of `client` in `slot` under a joint action. Clients at the
/// null power level neither transmit nor interfere.
pub fn sinr(
    client: usize,
    joint_action: &[Action],
    realization: &ChannelRealization,
    budget: &LinkBudget,
    slot: usize,
) -> f64 {
    let own = joint_action[client];
    let power = budget.transmit_power(own.power);
    if power == 0.0 {
        return 0.0;
    }
    let signal = power * realization.gain(slot, client, own.subband);
    let interference: f64 = joint_action
        .iter()
        .enumerate()
        .filter(|(m, a)| *m != client && a.subband == own.subband)
        .map(|(m, a)| budget.transmit_power(a.power) * realization.gain(slot, m, own.subband))
        .sum();
    signal / (budget.noise_power_w + interference)
}

/// Shannon capacity in bit/s.
pub fn capacity(sinr: f64, bandwidth_hz: f64) -> Result<f64> {
    if !(sinr >= 0.0) {
        return Err(Error::Domain(format!("SINR must be nonnegative, got {sinr}")));
    }
    ensure_finite("capacity", bandwidth_hz * sinr.ln_1p() / std::f64::consts::LN_2)
}

/// Capacities of all clients for one slot.
pub fn slot_capacities(
    joint_action: &[Action],
    realization: &ChannelRealization,
    budget: &LinkBudget,
    slot: usize,
) -> Result<Vec<f64>> {
    (0..joint_action.len())
        .map(|n| capacity(sinr(n, joint_action, realization, budget, slot), budget.bandwidth_hz))
        .collect()
}

/// Upload success: the capacity summed over the round's slots reaches
/// `payload / slot_duration` (inclusive).
pub fn upload_success(per_slot_capacities: &[f64], payload_bits: f64, slot_duration_s: f64) -> bool {
    let total: f64 = per_slot_capacities.iter().sum();
    total >= payload_bits / slot_duration_s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_relative_eq;

    fn budget(power: Vec<f64>, noise: f64) -> LinkBudget {
        LinkBudget::new(5e6, noise, power, 2, 1.0, 2, 5.0).unwrap()
    }

    #[test]
    fn positions_lie_in_cell_and_repeat_per_seed() {
        let cfg = GeometryConfig { clients: 10, cell_side_m: 500.0 };
        let g = sample_client_positions(3, &cfg).unwrap();
        assert_eq!(g.client_positions.len(), 10);
        for d in g.distances() {
            assert!(d > 1.0 && d <= 500.0 + 1e-9);
        }
        for p in &g.client_positions {
            assert!(in_hexagon(p.x, p.y, 500.0));
        }
        assert_eq!(g, sample_client_positions(3, &cfg).unwrap());
        let one = sample_client_positions(9, &GeometryConfig { clients: 1, cell_side_m: 500.0 }).unwrap();
        assert!(in_hexagon(one.client_positions[0].x, one.client_positions[0].y, 500.0));
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        assert!(sample_client_positions(0, &GeometryConfig { clients: 0, cell_side_m: 500.0 }).is_err());
        assert!(sample_client_positions(0, &GeometryConfig { clients: 3, cell_side_m: -1.0 }).is_err());
    }

    #[test]
    fn path_loss_reference_points() {
        assert_relative_eq!(path_loss_db(1000.0).unwrap(), 128.1, epsilon = 1e-12);
        assert_relative_eq!(path_loss_db(100.0).unwrap(), 90.5, epsilon = 1e-12);
        assert_relative_eq!(compute_large_scale(1000.0, 0.0).unwrap(), 10f64.powf(-12.81), max_relative = 1e-12);
        assert!(compute_large_scale(1000.0, f64::NEG_INFINITY).is_err());
        assert!(compute_large_scale(0.0, 0.0).is_err());
    }

    #[test]
    fn noise_budget_at_five_megahertz() {
        let dbm = linear_to_db(noise_power_watts(5e6, 5.0)) + 30.0;
        assert!((dbm - (-102.0)).abs() < 0.02, "{dbm}");
    }

    #[test]
    fn zero_delays_give_flat_fading() {
        let profile = ClusterProfile::new(vec![0.0; 3], vec![1.0 / 3.0; 3]).unwrap();
        let cfg = ChannelConfig {
            cluster_count: 3,
            mean_cluster_delay_s: 1e-7,
            shadowing_std_db: 8.0,
            carrier_hz: 2.5e9,
        };
        let b = budget(vec![1.0, 0.0], 1.0);
        let round = RoundChannel::from_parts(vec![1.0], vec![profile], &cfg, &b).unwrap();
        let r = round.draw_slots(5, &mut seeded(1));
        for s in 0..5 {
            assert_eq!(r.small_scale(s, 0, 0), r.small_scale(s, 0, 1));
        }
    }

    #[test]
    fn composite_gain_is_product() {
        let cfg = ChannelConfig {
            cluster_count: 4,
            mean_cluster_delay_s: 1e-7,
            shadowing_std_db: 8.0,
            carrier_hz: 2.5e9,
        };
        let b = budget(vec![1.0, 0.0], 1.0);
        let geo = sample_client_positions(1, &GeometryConfig { clients: 3, cell_side_m: 500.0 }).unwrap();
        let mut rng = seeded(2);
        let round = RoundChannel::sample(&geo, &cfg, &b, &mut rng).unwrap();
        let r = round.draw_slots(4, &mut rng);
        for s in 0..4 {
            for n in 0..3 {
                for c in 0..2 {
                    assert_eq!(r.gain(s, n, c), r.large_scale()[n] * r.small_scale(s, n, c).norm_sqr());
                }
            }
        }
    }

    #[test]
    fn sinr_examples() {
        let b = budget(vec![1.0, 0.0], 0.5);
        let r = ChannelRealization::from_gains(vec![0.5, 0.5, 2.0, 2.0, 0.5, 0.5], 3, 2).unwrap();
        let a = |c, p| Action { subband: c, power: p };
        // null level
        assert_eq!(sinr(0, &[a(0, 1), a(1, 0), a(1, 0)], &r, &b, 0), 0.0);
        // single active client with p*H = noise
        assert_relative_eq!(sinr(0, &[a(0, 0), a(1, 0), a(1, 1)], &r, &b, 0), 1.0, epsilon = 1e-15);
        // p1 H1 = 4 noise, p2 H2 = noise on the same sub-band
        let r2 = ChannelRealization::from_gains(vec![2.0, 2.0, 0.5, 0.5], 2, 2).unwrap();
        assert_relative_eq!(sinr(0, &[a(0, 0), a(0, 0)], &r2, &b, 0), 2.0, epsilon = 1e-15);
        // a silenced co-channel client does not interfere
        assert_relative_eq!(sinr(0, &[a(0, 0), a(0, 1)], &r2, &b, 0), 4.0, epsilon = 1e-15);
    }

    #[test]
    fn capacity_examples() {
        assert_eq!(capacity(0.0, 5e6).unwrap(), 0.0);
        assert_relative_eq!(capacity(1.0, 5e6).unwrap(), 5e6, max_relative = 1e-15);
        assert_relative_eq!(capacity(3.0, 5e6).unwrap(), 10e6, max_relative = 1e-15);
        assert!(capacity(-0.1, 5e6).is_err());
    }

    #[test]
    fn upload_success_examples() {
        assert!(!upload_success(&[0.0, 0.0], 5.0, 1.0));
        assert!(upload_success(&[3.0, 2.0], 5.0, 1.0));
        let need = 9_932_960.0 / (0.002 * 250.0);
        assert_relative_eq!(need, 19_865_920.0, max_relative = 1e-15);
        assert!(upload_success(&vec![need; 250], 9_932_960.0 * 250.0, 0.002 * 250.0));
        assert!(!upload_success(&vec![need * 0.999; 250], 9_932_960.0 * 250.0, 0.002 * 250.0));
    }

    #[test]
    fn budget_validation() {
        assert!(LinkBudget::new(5e6, 1e-13, vec![0.2, 0.2, 0.0], 2, 0.002, 20, 1e5).is_err());
        assert!(LinkBudget::new(5e6, 1e-13, vec![0.2], 2, 0.002, 20, 1e5).is_err());
        assert!(LinkBudget::new(0.0, 1e-13, vec![0.2, 0.0], 2, 0.002, 20, 1e5).is_err());
        let b = LinkBudget::new(5e6, 1e-13, vec![0.2, 0.01, 1e-13], 2, 0.002, 20, 1e5).unwrap();
        assert_eq!(b.transmit_power(2), 0.0);
        assert_eq!(b.action_count(), 6);
    }

    #[test]
    fn trace_dump_has_one_row_per_entry() {
        let r = ChannelRealization::from_gains(vec![1.0; 12], 3, 2).unwrap();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(TRACE_HEADER).unwrap();
        r.write_trace_csv(4, &mut w).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert_eq!(text.lines().count(), 13);
        assert!(text.lines().nth(1).unwrap().starts_with("4,0,0,0,"));
    }
}
