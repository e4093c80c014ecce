//! EV grid-balancing pilot: forecasting surplus, planning day-ahead requests
//! and matching EVs to intraday requests. Everything here is pure; ledger
//! operations live in [`market`].

pub mod market;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contracts::market::RequestScenario;
use crate::identity::Address;

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Per-slot production and consumption for one grid zone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PowerForecast {
    /// logical ms at which slot 0 starts
    pub start: u64,
    pub slot_ms: u64,
    pub production_wh: Vec<u64>,
    pub consumption_wh: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ForecastError {
    #[error("forecast has no slots")]
    EmptyForecast,
    #[error("production has {production} slots, consumption {consumption}")]
    LengthMismatch {
        production: usize,
        consumption: usize,
    },
    #[error("slot length must be positive")]
    ZeroSlot,
}

impl PowerForecast {
    pub fn validate(&self) -> Result<(), ForecastError> {
        if self.production_wh.len() != self.consumption_wh.len() {
            return Err(ForecastError::LengthMismatch {
                production: self.production_wh.len(),
                consumption: self.consumption_wh.len(),
            });
        }
        if self.production_wh.is_empty() {
            return Err(ForecastError::EmptyForecast);
        }
        if self.slot_ms == 0 {
            return Err(ForecastError::ZeroSlot);
        }
        Ok(())
    }

    pub fn slot_bounds(&self, slot: usize) -> (u64, u64) {
        let start = self.start + slot as u64 * self.slot_ms;
        (start, start + self.slot_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Surplus {
    pub slot: usize,
    pub surplus_wh: u64,
}

/// Slots where production strictly exceeds consumption.
pub fn detect_reverse_power_flow(f: &PowerForecast) -> Vec<Surplus> {
    f.production_wh
        .iter()
        .zip(&f.consumption_wh)
        .enumerate()
        .filter(|(_, (p, c))| p > c)
        .map(|(slot, (p, c))| Surplus {
            slot,
            surplus_wh: p - c,
        })
        .collect()
}

/// Token budget as `tokens` per `per_wh` watt-hours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetRate {
    pub tokens: u64,
    pub per_wh: u64,
}

impl BudgetRate {
    pub fn incentive(&self, wh: u64) -> u64 {
        (wh as u128 * self.tokens as u128).div_ceil(self.per_wh.max(1) as u128) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Zone {
    pub lat: i64,
    pub lon: i64,
    pub radius_m: u64,
}

/// Fields of a request before the market contract assigns its id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_id: Option<String>,
    pub scenario: String,
    pub energy_wh: u64,
    pub start: u64,
    pub end: u64,
    pub lat: i64,
    pub lon: i64,
    pub radius_m: u64,
    pub incentive_tokens: u64,
}

impl RequestSpec {
    pub fn scenario(&self) -> Option<RequestScenario> {
        RequestScenario::parse(&self.scenario)
    }
}

/// One day-ahead request per surplus slot, `incentive = ceil(surplus × rate)`.
pub fn plan_day_ahead(
    f: &PowerForecast,
    zone: Zone,
    rate: BudgetRate,
) -> Result<Vec<RequestSpec>, ForecastError> {
    f.validate()?;
    Ok(detect_reverse_power_flow(f)
        .into_iter()
        .map(|s| {
            let (start, end) = f.slot_bounds(s.slot);
            RequestSpec {
                plan_id: Some(format!("DA-{start}-{:02}", s.slot)),
                scenario: RequestScenario::DayAhead.as_str().to_string(),
                energy_wh: s.surplus_wh,
                start,
                end,
                lat: zone.lat,
                lon: zone.lon,
                radius_m: zone.radius_m,
                incentive_tokens: rate.incentive(s.surplus_wh),
            }
        })
        .collect())
}

/// Great-circle distance in metres between two micro-degree positions.
pub fn haversine_m(lat1: i64, lon1: i64, lat2: i64, lon2: i64) -> f64 {
    let rad = |v: i64| (v as f64 / 1e6).to_radians();
    let (p1, p2) = (rad(lat1), rad(lat2));
    let dp = p2 - p1;
    let dl = rad(lon2) - rad(lon1);
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserType {
    Commuter,
    Fleet,
    Casual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvStatus {
    Idle,
    Charging,
    Driving,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvProfile {
    pub ev: String,
    pub user_type: UserType,
    pub lat: i64,
    pub lon: i64,
    pub residual_autonomy_m: u64,
    pub status: EvStatus,
    pub battery_capacity_wh: u64,
    pub owner: Address,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub ev: String,
    pub distance_m: f64,
}

/// Idle EVs inside the radius that can reach the site, nearest first, ties
/// by EV id.
pub fn match_candidates(zone: Zone, fleet: &[EvProfile]) -> Vec<Candidate> {
    let mut out: Vec<Candidate> = fleet
        .iter()
        .filter(|ev| ev.status == EvStatus::Idle)
        .filter_map(|ev| {
            let d = haversine_m(zone.lat, zone.lon, ev.lat, ev.lon);
            (d <= zone.radius_m as f64 && ev.residual_autonomy_m as f64 >= d).then(|| Candidate {
                ev: ev.ev.clone(),
                distance_m: d,
            })
        })
        .collect();
    out.sort_by(|a, b| {
        a.distance_m
            .total_cmp(&b.distance_m)
            .then_with(|| a.ev.cmp(&b.ev))
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn forecast(p: Vec<u64>, c: Vec<u64>) -> PowerForecast {
        PowerForecast {
            start: 86_400_000,
            slot_ms: 3_600_000,
            production_wh: p,
            consumption_wh: c,
        }
    }

    #[test]
    fn surplus_slots() {
        let f = forecast(vec![10_000, 50_000, 80_000, 30_000], vec![40_000; 4]);
        let s = detect_reverse_power_flow(&f);
        assert_eq!(
            s,
            vec![
                Surplus {
                    slot: 1,
                    surplus_wh: 10_000
                },
                Surplus {
                    slot: 2,
                    surplus_wh: 40_000
                }
            ]
        );
        assert!(
            detect_reverse_power_flow(&forecast(vec![5, 40_000], vec![40_000, 40_000])).is_empty()
        );
    }

    #[test]
    fn plan_from_forecast() {
        let f = forecast(vec![10_000, 50_000, 80_000, 30_000], vec![40_000; 4]);
        let zone = Zone {
            lat: 42_560_000,
            lon: 12_646_000,
            radius_m: 2000,
        };
        let plan = plan_day_ahead(
            &f,
            zone,
            BudgetRate {
                tokens: 1,
                per_wh: 1000,
            },
        )
        .unwrap();
        let got: Vec<(u64, u64)> = plan
            .iter()
            .map(|r| (r.energy_wh, r.incentive_tokens))
            .collect();
        assert_eq!(got, vec![(10_000, 10), (40_000, 40)]);
        assert_eq!(
            (plan[0].start, plan[0].end),
            (86_400_000 + 3_600_000, 86_400_000 + 7_200_000)
        );
        let one = plan_day_ahead(
            &forecast(vec![1], vec![0]),
            zone,
            BudgetRate {
                tokens: 1,
                per_wh: 1000,
            },
        )
        .unwrap();
        assert_eq!(one[0].incentive_tokens, 1);
        assert_eq!(
            plan_day_ahead(
                &forecast(vec![], vec![]),
                zone,
                BudgetRate {
                    tokens: 1,
                    per_wh: 1
                }
            ),
            Err(ForecastError::EmptyForecast)
        );
        assert!(matches!(
            plan_day_ahead(
                &forecast(vec![1, 2], vec![1]),
                zone,
                BudgetRate {
                    tokens: 1,
                    per_wh: 1
                }
            ),
            Err(ForecastError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn haversine_known_distances() {
        assert_eq!(haversine_m(0, 0, 0, 0), 0.0);
        // one degree of latitude on this sphere
        let d = haversine_m(0, 0, 1_000_000, 0);
        assert!((d - EARTH_RADIUS_M * std::f64::consts::PI / 180.0).abs() < 1e-6);
        let d = haversine_m(42_560_000, 12_646_000, 42_560_000, 12_646_000 + 1_000_000);
        assert!((d - 81_946.0).abs() < 50.0, "{d}");
    }

    /// Micro-degree latitude offset for `m` metres north.
    fn north(m: f64) -> i64 {
        ((m / EARTH_RADIUS_M).to_degrees() * 1e6).round() as i64
    }

    fn ev(id: &str, m: f64, autonomy: u64, status: EvStatus) -> EvProfile {
        EvProfile {
            ev: id.into(),
            user_type: UserType::Commuter,
            lat: 42_560_000 + north(m),
            lon: 12_646_000,
            residual_autonomy_m: autonomy,
            status,
            battery_capacity_wh: 50_000,
            owner: crate::Keypair::from_label(id).address(),
        }
    }

    #[test]
    fn matching_filters_and_ranks() {
        let zone = Zone {
            lat: 42_560_000,
            lon: 12_646_000,
            radius_m: 1000,
        };
        let fleet = vec![
            ev("EV1", 500.0, 10_000, EvStatus::Idle),
            ev("EV2", 100.0, 10_000, EvStatus::Driving),
            ev("EV3", 900.0, 600, EvStatus::Idle),
        ];
        let m = match_candidates(zone, &fleet);
        assert_eq!(
            m.iter().map(|c| c.ev.as_str()).collect::<Vec<_>>(),
            vec!["EV1"]
        );
        assert!(match_candidates(zone, &[]).is_empty());
        let tie = vec![
            ev("EV-B", 300.0, 5000, EvStatus::Idle),
            ev("EV-A", 300.0, 5000, EvStatus::Idle),
        ];
        let m = match_candidates(zone, &tie);
        assert_eq!(
            m.iter().map(|c| c.ev.as_str()).collect::<Vec<_>>(),
            vec!["EV-A", "EV-B"]
        );
    }

    fn brute_force(zone: Zone, fleet: &[EvProfile]) -> Vec<String> {
        let mut keep = Vec::new();
        for e in fleet {
            let d = haversine_m(zone.lat, zone.lon, e.lat, e.lon);
            if e.status == EvStatus::Idle
                && d <= zone.radius_m as f64
                && e.residual_autonomy_m as f64 >= d
            {
                keep.push((d, e.ev.clone()));
            }
        }
        // selection sort: independent of the library sort
        let mut out = Vec::new();
        while !keep.is_empty() {
            let mut best = 0;
            for i in 1..keep.len() {
                if keep[i].0 < keep[best].0
                    || (keep[i].0 == keep[best].0 && keep[i].1 < keep[best].1)
                {
                    best = i;
                }
            }
            out.push(keep.remove(best).1);
        }
        out
    }

    proptest! {
        #[test]
        fn matching_equals_brute_force(
            radius in 0u64..5000,
            evs in prop::collection::vec((0i64..40_000, 0i64..40_000, 0u64..6000, 0u8..3, 0u8..4), 0..50)
        ) {
            let zone = Zone { lat: 42_560_000, lon: 12_646_000, radius_m: radius };
            let fleet: Vec<EvProfile> = evs.iter().enumerate().map(|(i, &(dlat, dlon, aut, st, _))| EvProfile {
                ev: format!("EV{:02}", (i * 7) % 50),
                user_type: UserType::Fleet,
                lat: zone.lat + dlat - 20_000,
                lon: zone.lon + dlon - 20_000,
                residual_autonomy_m: aut,
                status: [EvStatus::Idle, EvStatus::Charging, EvStatus::Driving][st as usize],
                battery_capacity_wh: 40_000,
                owner: crate::Address(crate::sha256(&[i as u8]).0),
            }).collect();
            let got: Vec<String> = match_candidates(zone, &fleet).into_iter().map(|c| c.ev).collect();
            prop_assert_eq!(got, brute_force(zone, &fleet));
        }

        #[test]
        fn planner_covers_strict_surplus_slots(slots in prop::collection::vec((0u64..100_000, 0u64..100_000), 1..48)) {
            let (p, c): (Vec<u64>, Vec<u64>) = slots.iter().copied().unzip();
            let f = forecast(p.clone(), c.clone());
            let plan = plan_day_ahead(&f, Zone { lat: 0, lon: 0, radius_m: 1 }, BudgetRate { tokens: 3, per_wh: 1000 }).unwrap();
            let expected: Vec<usize> = (0..p.len()).filter(|&i| p[i] > c[i]).collect();
            prop_assert_eq!(plan.len(), expected.len());
            for (r, &i) in plan.iter().zip(&expected) {
                prop_assert_eq!(r.energy_wh, p[i] - c[i]);
                prop_assert_eq!(r.start, f.slot_bounds(i).0);
                let inc = r.incentive_tokens as u128;
                let exact = (p[i] - c[i]) as u128 * 3;
                prop_assert!(inc * 1000 >= exact && (inc - 1) * 1000 < exact);
            }
        }
    }
}
