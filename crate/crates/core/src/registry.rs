//! Name-keyed factories for interchangeable algorithms.
//!
//! Each registry maps a config string to a constructor. The built-in
//! registries are assembled on demand; callers may extend a registry with
//! their own entries before building.

use std::collections::BTreeMap;

use crate::client::{ClipUpdateNorm, Identity, PostProcessSpec, PostProcessor};
use crate::cost::{AllReduce, ParameterServer, RingAllReduce, Topology};
use crate::error::{Error, Result};
use crate::optim::{
    AdamWState, FedAvg, FedMomentum, LocalOptimizer, LocalOptimizerSpec, ServerOptSpec,
    ServerOptimizer, Sgd,
};
use crate::tensor::ParamVector;

pub type ServerOptFactory = fn(&ServerOptSpec) -> Result<Box<dyn ServerOptimizer>>;
pub type LocalOptFactory = fn(&LocalOptimizerSpec, &ParamVector) -> Result<Box<dyn LocalOptimizer>>;
pub type TopologyFactory = fn() -> Box<dyn Topology>;
pub type PostProcessFactory = fn(&PostProcessSpec) -> Result<Box<dyn PostProcessor>>;

#[derive(Clone, Debug)]
pub struct Registry<F> {
    kind: &'static str,
    entries: BTreeMap<String, F>,
}

impl<F: Copy> Registry<F> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, factory: F) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("{} `{name}` registered twice", self.kind)));
        }
        self.entries.insert(name.to_string(), factory);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<F> {
        self.entries.get(name).copied().ok_or_else(|| Error::Lookup {
            kind: self.kind,
            name: name.to_string(),
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    fn with(mut self, name: &str, factory: F) -> Self {
        self.register(name, factory).expect("built-in names are unique");
        self
    }
}

fn fedavg(_: &ServerOptSpec) -> Result<Box<dyn ServerOptimizer>> {
    Ok(Box::new(FedAvg))
}

fn fedmom(s: &ServerOptSpec) -> Result<Box<dyn ServerOptimizer>> {
    Ok(Box::new(FedMomentum::new(s.lr, s.momentum, s.nesterov)?))
}

fn adamw(s: &LocalOptimizerSpec, like: &ParamVector) -> Result<Box<dyn LocalOptimizer>> {
    Ok(Box::new(AdamWState::new(like, s)))
}

fn sgd(s: &LocalOptimizerSpec, _: &ParamVector) -> Result<Box<dyn LocalOptimizer>> {
    Ok(Box::new(Sgd::new(s.clip_norm)))
}

fn ps() -> Box<dyn Topology> {
    Box::new(ParameterServer)
}

fn ar() -> Box<dyn Topology> {
    Box::new(AllReduce)
}

fn rar() -> Box<dyn Topology> {
    Box::new(RingAllReduce)
}

fn identity(_: &PostProcessSpec) -> Result<Box<dyn PostProcessor>> {
    Ok(Box::new(Identity))
}

fn clip_update(s: &PostProcessSpec) -> Result<Box<dyn PostProcessor>> {
    Ok(Box::new(ClipUpdateNorm::new(s.max_update_norm)?))
}

pub fn server_optimizers() -> Registry<ServerOptFactory> {
    Registry::<ServerOptFactory>::new("server optimizer")
        .with("fedavg", fedavg)
        .with("fedmom", fedmom)
}

pub fn local_optimizers() -> Registry<LocalOptFactory> {
    Registry::<LocalOptFactory>::new("local optimizer")
        .with("adamw", adamw)
        .with("sgd", sgd)
}

pub fn topologies() -> Registry<TopologyFactory> {
    Registry::<TopologyFactory>::new("topology")
        .with("ps", ps)
        .with("ar", ar)
        .with("rar", rar)
}

pub fn post_processors() -> Registry<PostProcessFactory> {
    Registry::<PostProcessFactory>::new("post-processor")
        .with("none", identity)
        .with("clip-update", clip_update)
}

pub fn build_server_optimizer(spec: &ServerOptSpec) -> Result<Box<dyn ServerOptimizer>> {
    server_optimizers().get(&spec.kind)?(spec)
}

pub fn build_local_optimizer(
    spec: &LocalOptimizerSpec,
    like: &ParamVector,
) -> Result<Box<dyn LocalOptimizer>> {
    local_optimizers().get(&spec.kind)?(spec, like)
}

pub fn build_topology(name: &str) -> Result<Box<dyn Topology>> {
    Ok(topologies().get(name)?())
}

pub fn build_post_processor(spec: &PostProcessSpec) -> Result<Box<dyn PostProcessor>> {
    post_processors().get(&spec.kind)?(spec)
}
