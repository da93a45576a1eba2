//! Three-region in-memory neuron cache.
//!
//! The fixed region pins attention/KV bytes for the whole run. The hot
//! region holds NPU-facing neuron clusters and evicts at cluster
//! granularity; the cold region holds individual neuron bundles (whose
//! Gate and Up/Down fragments may be resident independently, a
//! consequence of two-phase loading) and evicts whole neurons. Both LRU
//! orders use a logical tick, not wall time, so replay is deterministic.
//! Evicted weights are discarded; there is no write-back.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub total_bytes: u64,
    pub fixed_bytes: u64,
    pub hot_bytes: u64,
    pub cold_bytes: u64,
}

impl CacheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fixed_bytes + self.hot_bytes + self.cold_bytes > self.total_bytes {
            return Err(Error::constraint(format!(
                "region budgets exceed total: {} + {} + {} > {}",
                self.fixed_bytes, self.hot_bytes, self.cold_bytes, self.total_bytes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: u32,
    pub index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fragment {
    Gate,
    UpDown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Fixed,
    Hot,
    Cold,
}

/// Insertion target: fixed entries and hot clusters carry opaque ids,
/// cold insertions address one fragment of one neuron.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Key {
    Fixed(u64),
    Cluster(u64),
    Neuron(NeuronId, Fragment),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Gate,
    UpDown,
    Whole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Query {
    Fixed(u64),
    Cluster(u64),
    Neuron(NeuronId, Phase),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lookup {
    Hit,
    /// Some but not all requested fragments resident (e.g. the Gate
    /// fragment survived a phase-1 load but Up/Down was never fetched).
    Partial,
    Miss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Evicted {
    Cluster(u64),
    /// Whole neuron; both fragments leave together.
    Neuron(NeuronId),
}

#[derive(Debug, Clone, Copy, Default)]
struct ColdEntry {
    gate_bytes: u64,
    updown_bytes: u64,
    last_use: u64,
}

impl ColdEntry {
    fn bytes(&self) -> u64 {
        self.gate_bytes + self.updown_bytes
    }
}

#[derive(Debug, Clone, Copy)]
struct HotEntry {
    bytes: u64,
    last_use: u64,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Serialize)]
pub struct RegionCounters {
    pub lookups: u64,
    pub hits: u64,
    pub partials: u64,
    pub misses: u64,
}

impl RegionCounters {
    fn record(&mut self, r: Lookup) {
        self.lookups += 1;
        match r {
            Lookup::Hit => self.hits += 1,
            Lookup::Partial => self.partials += 1,
            Lookup::Miss => self.misses += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheStats {
    pub overall: RegionCounters,
    pub fixed: RegionCounters,
    pub hot: RegionCounters,
    pub cold: RegionCounters,
    pub hit_rate: f64,
    /// Median and tail of per-window (per-token) miss rates.
    pub window_miss_p50: f64,
    pub window_miss_p99: f64,
}

#[derive(Debug)]
pub struct NeuronCache {
    config: CacheConfig,
    tick: u64,
    fixed: HashMap<u64, u64>,
    fixed_used: u64,
    hot: HashMap<u64, HotEntry>,
    hot_order: BTreeMap<u64, u64>,
    hot_used: u64,
    cold: HashMap<NeuronId, ColdEntry>,
    cold_order: BTreeMap<u64, NeuronId>,
    cold_used: u64,
    counters: [RegionCounters; 3],
    window_lookups: u64,
    window_misses: u64,
    window_miss_rates: Vec<f64>,
}

impl NeuronCache {
    pub fn new(config: CacheConfig) -> Result<Self> {
        config.validate()?;
        Ok(NeuronCache {
            config,
            tick: 0,
            fixed: HashMap::new(),
            fixed_used: 0,
            hot: HashMap::new(),
            hot_order: BTreeMap::new(),
            hot_used: 0,
            cold: HashMap::new(),
            cold_order: BTreeMap::new(),
            cold_used: 0,
            counters: [RegionCounters::default(); 3],
            window_lookups: 0,
            window_misses: 0,
            window_miss_rates: Vec::new(),
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    fn next_tick(&mut self) -> u64 {
        self.tick += 1;
        self.tick
    }

    fn region_index(region: Region) -> usize {
        match region {
            Region::Fixed => 0,
            Region::Hot => 1,
            Region::Cold => 2,
        }
    }

    /// Looks up an entry, refreshing its recency on hit or partial hit.
    pub fn lookup(&mut self, query: Query) -> Lookup {
        let (region, result) = match query {
            Query::Fixed(id) => (
                Region::Fixed,
                if self.fixed.contains_key(&id) { Lookup::Hit } else { Lookup::Miss },
            ),
            Query::Cluster(id) => {
                let tick = self.next_tick();
                let res = if let Some(e) = self.hot.get_mut(&id) {
                    self.hot_order.remove(&e.last_use);
                    e.last_use = tick;
                    self.hot_order.insert(tick, id);
                    Lookup::Hit
                } else {
                    Lookup::Miss
                };
                (Region::Hot, res)
            }
            Query::Neuron(id, phase) => {
                let tick = self.next_tick();
                let res = if let Some(e) = self.cold.get_mut(&id) {
                    let gate = e.gate_bytes > 0;
                    let updown = e.updown_bytes > 0;
                    let res = match phase {
                        Phase::Gate if gate => Lookup::Hit,
                        Phase::UpDown if updown => Lookup::Hit,
                        Phase::Whole if gate && updown => Lookup::Hit,
                        Phase::Whole if gate || updown => Lookup::Partial,
                        _ => Lookup::Miss,
                    };
                    if res != Lookup::Miss {
                        self.cold_order.remove(&e.last_use);
                        e.last_use = tick;
                        self.cold_order.insert(tick, id);
                    }
                    res
                } else {
                    Lookup::Miss
                };
                (Region::Cold, res)
            }
        };
        self.counters[Self::region_index(region)].record(result);
        self.window_lookups += 1;
        if result != Lookup::Hit {
            self.window_misses += 1;
        }
        result
    }

    fn evict_hot_until(&mut self, deficit_budget: u64, evicted: &mut Vec<Evicted>) {
        while self.hot_used > deficit_budget {
            let (&tick, &id) = self.hot_order.iter().next().expect("hot usage without entries");
            self.hot_order.remove(&tick);
            let e = self.hot.remove(&id).expect("hot order desync");
            self.hot_used -= e.bytes;
            evicted.push(Evicted::Cluster(id));
        }
    }

    fn evict_cold_until(&mut self, deficit_budget: u64, evicted: &mut Vec<Evicted>) {
        while self.cold_used > deficit_budget {
            let (&tick, &id) = self.cold_order.iter().next().expect("cold usage without entries");
            self.cold_order.remove(&tick);
            let e = self.cold.remove(&id).expect("cold order desync");
            self.cold_used -= e.bytes();
            evicted.push(Evicted::Neuron(id));
        }
    }

    /// Inserts (or refreshes) an entry, evicting LRU entries of the same
    /// region until it fits. Rejects entries larger than the region
    /// budget. Returns the evicted keys.
    pub fn insert(&mut self, key: Key, bytes: u64) -> Result<Vec<Evicted>> {
        let mut evicted = Vec::new();
        match key {
            Key::Fixed(id) => {
                let existing = self.fixed.get(&id).copied().unwrap_or(0);
                if self.fixed_used - existing + bytes > self.config.fixed_bytes {
                    return Err(Error::constraint(format!(
                        "fixed entry of {bytes} bytes does not fit budget {}",
                        self.config.fixed_bytes
                    )));
                }
                self.fixed_used = self.fixed_used - existing + bytes;
                self.fixed.insert(id, bytes);
            }
            Key::Cluster(id) => {
                if bytes > self.config.hot_bytes {
                    return Err(Error::constraint(format!(
                        "cluster of {bytes} bytes exceeds hot budget {}",
                        self.config.hot_bytes
                    )));
                }
                if let Some(old) = self.hot.remove(&id) {
                    self.hot_order.remove(&old.last_use);
                    self.hot_used -= old.bytes;
                }
                self.evict_hot_until(self.config.hot_bytes - bytes, &mut evicted);
                let tick = self.next_tick();
                self.hot.insert(id, HotEntry { bytes, last_use: tick });
                self.hot_order.insert(tick, id);
                self.hot_used += bytes;
            }
            Key::Neuron(id, fragment) => {
                let existing = self.cold.get(&id).copied().unwrap_or_default();
                let new_total = match fragment {
                    Fragment::Gate => bytes + existing.updown_bytes,
                    Fragment::UpDown => existing.gate_bytes + bytes,
                };
                if new_total > self.config.cold_bytes {
                    return Err(Error::constraint(format!(
                        "neuron of {new_total} bytes exceeds cold budget {}",
                        self.config.cold_bytes
                    )));
                }
                if self.cold.remove(&id).is_some() {
                    self.cold_order.remove(&existing.last_use);
                    self.cold_used -= existing.bytes();
                }
                self.evict_cold_until(self.config.cold_bytes - new_total, &mut evicted);
                let tick = self.next_tick();
                let entry = match fragment {
                    Fragment::Gate => ColdEntry {
                        gate_bytes: bytes,
                        updown_bytes: existing.updown_bytes,
                        last_use: tick,
                    },
                    Fragment::UpDown => ColdEntry {
                        gate_bytes: existing.gate_bytes,
                        updown_bytes: bytes,
                        last_use: tick,
                    },
                };
                self.cold_used += entry.bytes();
                self.cold.insert(id, entry);
                self.cold_order.insert(tick, id);
            }
        }
        Ok(evicted)
    }

    /// Applies new region budgets; shrinking a region evicts its LRU
    /// entries until it fits, growing needs no action. The fixed region
    /// is pinned and must not shrink below its current usage.
    pub fn resize(&mut self, new_config: CacheConfig) -> Result<Vec<Evicted>> {
        new_config.validate()?;
        if new_config.fixed_bytes < self.fixed_used {
            return Err(Error::constraint(format!(
                "fixed region cannot shrink below pinned usage {}",
                self.fixed_used
            )));
        }
        self.config = new_config;
        let mut evicted = Vec::new();
        self.evict_hot_until(self.config.hot_bytes, &mut evicted);
        self.evict_cold_until(self.config.cold_bytes, &mut evicted);
        Ok(evicted)
    }

    /// Closes the per-token statistics window.
    pub fn end_window(&mut self) {
        if self.window_lookups > 0 {
            self.window_miss_rates
                .push(self.window_misses as f64 / self.window_lookups as f64);
        }
        self.window_lookups = 0;
        self.window_misses = 0;
    }

    pub fn stats(&self) -> CacheStats {
        let [fixed, hot, cold] = self.counters;
        let overall = RegionCounters {
            lookups: fixed.lookups + hot.lookups + cold.lookups,
            hits: fixed.hits + hot.hits + cold.hits,
            partials: fixed.partials + hot.partials + cold.partials,
            misses: fixed.misses + hot.misses + cold.misses,
        };
        let hit_rate = if overall.lookups == 0 {
            0.0
        } else {
            overall.hits as f64 / overall.lookups as f64
        };
        let mut windows = self.window_miss_rates.clone();
        windows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pct = |q: f64| -> f64 {
            if windows.is_empty() {
                return 0.0;
            }
            let idx = ((windows.len() as f64 - 1.0) * q).round() as usize;
            windows[idx]
        };
        CacheStats {
            overall,
            fixed,
            hot,
            cold,
            hit_rate,
            window_miss_p50: pct(0.50),
            window_miss_p99: pct(0.99),
        }
    }

    pub fn resident_bytes(&self, region: Region) -> u64 {
        match region {
            Region::Fixed => self.fixed_used,
            Region::Hot => self.hot_used,
            Region::Cold => self.cold_used,
        }
    }

    pub fn contains_cluster(&self, id: u64) -> bool {
        self.hot.contains_key(&id)
    }

    /// Verifies internal bookkeeping against budgets; run after every
    /// step in tests.
    pub fn audit(&self) -> Result<()> {
        let fixed_sum: u64 = self.fixed.values().sum();
        let hot_sum: u64 = self.hot.values().map(|e| e.bytes).sum();
        let cold_sum: u64 = self.cold.values().map(|e| e.bytes()).sum();
        if fixed_sum != self.fixed_used || hot_sum != self.hot_used || cold_sum != self.cold_used {
            return Err(Error::internal("cache usage counters out of sync".to_string()));
        }
        if self.fixed_used > self.config.fixed_bytes
            || self.hot_used > self.config.hot_bytes
            || self.cold_used > self.config.cold_bytes
        {
            return Err(Error::internal(format!(
                "region over budget: fixed {}/{} hot {}/{} cold {}/{}",
                self.fixed_used,
                self.config.fixed_bytes,
                self.hot_used,
                self.config.hot_bytes,
                self.cold_used,
                self.config.cold_bytes
            )));
        }
        if self.hot_order.len() != self.hot.len() || self.cold_order.len() != self.cold.len() {
            return Err(Error::internal("LRU order index out of sync".to_string()));
        }
        Ok(())
    }
}
