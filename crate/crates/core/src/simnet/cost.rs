//! Closed-form per-round runtime models and a batch-level event simulation that
//! converges to them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::clock::SimClock;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMethod {
    Tl,
    Fl,
    Sfl,
    Sl,
    SlPlus,
}

impl CostMethod {
    pub const ALL: [CostMethod; 5] = [
        CostMethod::Tl,
        CostMethod::Fl,
        CostMethod::Sfl,
        CostMethod::Sl,
        CostMethod::SlPlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CostMethod::Tl => "tl",
            CostMethod::Fl => "fl",
            CostMethod::Sfl => "sfl",
            CostMethod::Sl => "sl",
            CostMethod::SlPlus => "sl_plus",
        }
    }
}

impl fmt::Display for CostMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CostMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s || (s == "fedavg" && *m == CostMethod::Fl))
            .ok_or_else(|| Error::Config(format!("unknown cost method {s:?}")))
    }
}

/// Runtime parameters in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub t_comp_client: Vec<f64>,
    pub t_comm: f64,
    pub t_agg: f64,
    pub t_comp_server: f64,
    /// Client compute multiplier for SL+, which keeps extra layers on the client.
    #[serde(default = "unit_factor")]
    pub extra_client_layers_factor: f64,
}

fn unit_factor() -> f64 {
    1.0
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let scalars = [self.t_comm, self.t_agg, self.t_comp_server];
        if scalars.iter().chain(&self.t_comp_client).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("cost parameters must be finite and >= 0".into()));
        }
        if !(self.extra_client_layers_factor >= 1.0) || !self.extra_client_layers_factor.is_finite() {
            return Err(Error::Config(format!(
                "extra_client_layers_factor must be >= 1, got {}",
                self.extra_client_layers_factor
            )));
        }
        Ok(())
    }
}

fn max0(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, f64::max)
}

/// Per-round runtime. SL and SL+ visit clients one after another, so their client
/// terms are summed; every other method waits for its slowest client.
pub fn estimate_runtime(method: CostMethod, p: &CostParams) -> f64 {
    let clients = p.t_comp_client.iter().copied();
    match method {
        CostMethod::Fl => max0(clients) + p.t_comm + p.t_agg,
        CostMethod::Sl => clients.map(|c| c + 2.0 * p.t_comm).sum::<f64>() + p.t_comp_server,
        CostMethod::SlPlus => {
            clients
                .map(|c| c * p.extra_client_layers_factor + 2.0 * p.t_comm)
                .sum::<f64>()
                + p.t_comp_server
        }
        CostMethod::Sfl => max0(clients.map(|c| c + p.t_comm)) + p.t_agg,
        CostMethod::Tl => max0(clients) + p.t_comm + p.t_comp_server,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Ev {
    /// Client finished the compute of one batch.
    Computed { client: usize, batch: usize },
    /// A message of a client's batch exchange arrived.
    Delivered { client: usize, batch: usize, hop: u8 },
    ServerDone { client: usize, batch: usize },
    Uploaded { client: usize },
    Aggregated,
    Broadcast { batch: usize },
}

/// Event-driven simulation of one round split into `batches` batches. Each message
/// carries its share of `t_comm` plus `message_latency` seconds, which is the
/// granularity term separating the result from the closed form.
pub fn simulate_method(method: CostMethod, p: &CostParams, batches: usize, message_latency: f64) -> Result<f64> {
    p.validate()?;
    if batches == 0 {
        return Err(Error::Config("simulation needs at least one batch".into()));
    }
    if !(message_latency >= 0.0) {
        return Err(Error::Config("message latency must be >= 0".into()));
    }
    let nb = batches as f64;
    let k = p.t_comp_client.len();
    let factor = if method == CostMethod::SlPlus {
        p.extra_client_layers_factor
    } else {
        1.0
    };
    let compute = |c: usize| p.t_comp_client[c] * factor / nb;
    let mut clock: SimClock<Ev> = SimClock::new();
    let mut end: f64 = 0.0;
    if k == 0 {
        return Ok(match method {
            CostMethod::Fl | CostMethod::Sfl => p.t_agg,
            CostMethod::Sl | CostMethod::SlPlus => p.t_comp_server,
            CostMethod::Tl => {
                // Server work and broadcasts still happen per batch.
                p.t_comp_server + p.t_comm / 2.0 + nb * message_latency
            }
        });
    }
    match method {
        CostMethod::Tl => {
            // Per batch: parallel client compute, report (half the comm share),
            // central backward, broadcast (other half).
            let mut reports = 0;
            for c in 0..k {
                clock.schedule_in(compute(c), Ev::Computed { client: c, batch: 0 });
            }
            while let Some((t, ev)) = clock.pop() {
                end = end.max(t);
                match ev {
                    Ev::Computed { client, batch } => clock.schedule_in(
                        p.t_comm / (2.0 * nb) + message_latency,
                        Ev::Delivered { client, batch, hop: 0 },
                    ),
                    Ev::Delivered { batch, .. } => {
                        reports += 1;
                        if reports == k {
                            reports = 0;
                            clock.schedule_in(p.t_comp_server / nb, Ev::ServerDone { client: 0, batch });
                        }
                    }
                    Ev::ServerDone { batch, .. } => {
                        clock.schedule_in(p.t_comm / (2.0 * nb) + message_latency, Ev::Broadcast { batch })
                    }
                    Ev::Broadcast { batch } => {
                        if batch + 1 < batches {
                            for c in 0..k {
                                clock.schedule_in(compute(c), Ev::Computed { client: c, batch: batch + 1 });
                            }
                        }
                    }
                    _ => unreachable!("unused in TL"),
                }
            }
        }
        CostMethod::Fl => {
            // Local batches back to back, one upload, then aggregation.
            let mut uploaded = 0;
            for c in 0..k {
                clock.schedule_in(compute(c), Ev::Computed { client: c, batch: 0 });
            }
            while let Some((t, ev)) = clock.pop() {
                end = end.max(t);
                match ev {
                    Ev::Computed { client, batch } if batch + 1 < batches => {
                        clock.schedule_in(compute(client), Ev::Computed { client, batch: batch + 1 })
                    }
                    Ev::Computed { client, .. } => {
                        clock.schedule_in(p.t_comm + message_latency, Ev::Uploaded { client })
                    }
                    Ev::Uploaded { .. } => {
                        uploaded += 1;
                        if uploaded == k {
                            clock.schedule_in(p.t_agg, Ev::Aggregated);
                        }
                    }
                    Ev::Aggregated => {}
                    _ => unreachable!("unused in FL"),
                }
            }
        }
        CostMethod::Sfl => {
            // Clients in parallel against their own server replica; one exchange
            // per batch, aggregation at the end.
            let mut finished = 0;
            for c in 0..k {
                clock.schedule_in(compute(c), Ev::Computed { client: c, batch: 0 });
            }
            while let Some((t, ev)) = clock.pop() {
                end = end.max(t);
                match ev {
                    Ev::Computed { client, batch } => clock.schedule_in(
                        p.t_comm / nb + message_latency,
                        Ev::Delivered { client, batch, hop: 0 },
                    ),
                    Ev::Delivered { client, batch, .. } if batch + 1 < batches => {
                        clock.schedule_in(compute(client), Ev::Computed { client, batch: batch + 1 })
                    }
                    Ev::Delivered { .. } => {
                        finished += 1;
                        if finished == k {
                            clock.schedule_in(p.t_agg, Ev::Aggregated);
                        }
                    }
                    Ev::Aggregated => {}
                    _ => unreachable!("unused in SFL"),
                }
            }
        }
        CostMethod::Sl | CostMethod::SlPlus => {
            // One client at a time: compute, send smashed data, server step, return
            // the cut gradient; the server's total work is spread over all batches.
            let server_share = p.t_comp_server / (nb * k as f64);
            clock.schedule_in(compute(0), Ev::Computed { client: 0, batch: 0 });
            while let Some((t, ev)) = clock.pop() {
                end = end.max(t);
                match ev {
                    Ev::Computed { client, batch } => clock.schedule_in(
                        p.t_comm / nb + message_latency,
                        Ev::Delivered { client, batch, hop: 0 },
                    ),
                    Ev::Delivered { client, batch, hop: 0 } => {
                        clock.schedule_in(server_share, Ev::ServerDone { client, batch })
                    }
                    Ev::ServerDone { client, batch } => clock.schedule_in(
                        p.t_comm / nb + message_latency,
                        Ev::Delivered { client, batch, hop: 1 },
                    ),
                    Ev::Delivered { client, batch, .. } => {
                        if batch + 1 < batches {
                            clock.schedule_in(compute(client), Ev::Computed { client, batch: batch + 1 });
                        } else if client + 1 < k {
                            clock.schedule_in(compute(client + 1), Ev::Computed { client: client + 1, batch: 0 });
                        }
                    }
                    _ => unreachable!("unused in SL"),
                }
            }
        }
    }
    Ok(end)
}
