//! Seeded random helpers shared by the unit tests.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::config::{
    CostConfig, DisturbanceConfig, DisturbanceMode, NoiseConfig, RunConfig, SegmentConfig,
};
use crate::learner::ThetaMethod;
use crate::network::{HeatExchanger, NetworkTopology, Pipe, Role};
use crate::numerics::spectral_radius;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Random square matrix rescaled to the requested spectral radius.
pub fn random_stable_matrix(rng: &mut ChaCha20Rng, size: usize, radius: f64) -> DMatrix<f64> {
    let m = random_matrix(rng, size, size, 1.0);
    let rho = spectral_radius(&m).unwrap();
    if rho == 0.0 {
        return m;
    }
    m * (radius / rho)
}

pub fn random_spd(rng: &mut ChaCha20Rng, size: usize) -> DMatrix<f64> {
    let m = random_matrix(rng, size, size, 1.0);
    &m * m.transpose() + DMatrix::identity(size, size) * 0.1
}

/// The default desk-scale network: one producer feeding two consumers.
pub fn desk_network() -> NetworkTopology {
    let (qa, qb) = (1.2, 0.8);
    NetworkTopology {
        exchangers: vec![
            HeatExchanger {
                id: "hx1".into(),
                role: Role::Producer,
                volume: 2.0,
                through_flow: qa + qb,
            },
            HeatExchanger {
                id: "hx2".into(),
                role: Role::Consumer,
                volume: 1.0,
                through_flow: qa,
            },
            HeatExchanger {
                id: "hx3".into(),
                role: Role::Consumer,
                volume: 1.5,
                through_flow: qb,
            },
        ],
        pipes: vec![
            Pipe {
                from: "hx1".into(),
                to: "hx2".into(),
                flow: qa,
            },
            Pipe {
                from: "hx1".into(),
                to: "hx3".into(),
                flow: qb,
            },
        ],
    }
}

/// A complete desk-scale run configuration: the default network, unit cost
/// weights, a constant demand-change disturbance, and a seeded run.
pub fn desk_config() -> RunConfig {
    RunConfig {
        topology: desk_network(),
        costs: CostConfig {
            f: vec![1.0, 1.0, 1.0],
            g: vec![1.0, 1.0, 1.0],
            q_e: vec![1.0, 1.0, 1.0],
            r_e: vec![1.0, 1.0, 1.0],
        },
        tau: 0.2,
        noise: NoiseConfig {
            sinusoids_per_channel: None,
            freq_range: None,
            base_amplitude: 0.02,
            decay: 0.995,
        },
        disturbance: DisturbanceConfig {
            mode: DisturbanceMode::Constant,
            segments: vec![SegmentConfig {
                start: 0,
                end: None,
                value: vec![0.0, -0.6, -0.4],
            }],
        },
        variation: -0.5,
        variation_sweep: vec![-0.5, -0.2, -0.1, 0.1, 0.2, 0.5],
        comparison_variations: vec![-0.2, -0.1, 0.1, 0.2],
        nonlinearity: 0.0,
        nonlinearity_sweep: vec![1e-7, 1e-4],
        horizon: 2000,
        seed: Some(7),
        initial_temperature: None,
        stop_tolerance: 1e-9,
        iteration_cap: 50,
        method: ThetaMethod::Matrix,
        divergence_bound: 1e6,
    }
}

/// Random connected producer/consumer network with conserved flows.
pub fn random_topology(rng: &mut ChaCha20Rng) -> NetworkTopology {
    let producers = rng.random_range(1..=3usize);
    let consumers = rng.random_range(1..=4usize);
    let mut exchangers = Vec::new();
    for i in 0..producers {
        exchangers.push(HeatExchanger {
            id: format!("p{i}"),
            role: Role::Producer,
            volume: rng.random_range(0.5..3.0),
            through_flow: 0.0,
        });
    }
    for j in 0..consumers {
        exchangers.push(HeatExchanger {
            id: format!("c{j}"),
            role: Role::Consumer,
            volume: rng.random_range(0.5..3.0),
            through_flow: 0.0,
        });
    }
    let mut pipes = Vec::new();
    // spanning connections keep the bipartite graph connected
    for j in 0..consumers {
        pipes.push(Pipe {
            from: format!("p{}", j % producers),
            to: format!("c{j}"),
            flow: rng.random_range(0.3..2.0),
        });
    }
    for i in 1..producers {
        pipes.push(Pipe {
            from: format!("p{i}"),
            to: "c0".to_string(),
            flow: rng.random_range(0.3..2.0),
        });
    }
    // occasional extra pipe
    if producers > 1 && consumers > 1 && rng.random_range(0.0..1.0) < 0.5 {
        pipes.push(Pipe {
            from: format!("p{}", producers - 1),
            to: format!("c{}", consumers - 1),
            flow: rng.random_range(0.3..2.0),
        });
    }
    let mut topo = NetworkTopology { exchangers, pipes };
    let n = topo.len();
    let mut incident = vec![0.0_f64; n];
    for pipe in &topo.pipes {
        let a = topo.index_of(&pipe.from).unwrap();
        let b = topo.index_of(&pipe.to).unwrap();
        incident[a] += pipe.flow;
        incident[b] += pipe.flow;
    }
    for (hx, q) in topo.exchangers.iter_mut().zip(incident) {
        hx.through_flow = q;
    }
    topo
}
