pub mod attention;
pub mod baselines;
pub mod channel;
pub mod harness;
pub mod hetgraph;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod stage1;
pub mod stage2;
pub mod training;
