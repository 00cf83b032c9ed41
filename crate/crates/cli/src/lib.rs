//! Library surface of the command-line driver: configuration, artifact
//! plumbing and the bundled determinism scenario, shared between the
//! binary and the acceptance tests.

pub mod artifacts;
pub mod config;

/// Small scenario used to exercise every subcommand twice and compare
/// artifacts byte for byte.
pub const DETERMINISM_SCENARIO: &str = r#"
scenario = "determinism-smoke"
seed = 7

[diffusion]
sigma = "identity"
dim = 2
scale = 1.0
entries = []
amplitude = 0.5

[kernel]
name = "biot-savart"
alpha = 1.0
gamma = 0.0
epsilon = 0.0

[vorticity]
name = "cos-bump"
height = 1.0
radius = 1.0

[constants]
q = 0.0
a_stroock = 0.0
kappa = 0.0
kappa_prime = 0.0
r_cutoff = 0.0
tau = 0.0

[grid]
horizon = 0.0
time_nodes = 2
box_half_width = 1.0
nodes_per_axis = 3
substeps = 2

[mc]
samples = 500
paths = 1
path_budget = 2000
steps = 10

[simulate]
starts = [[0.0, 0.0]]
horizon = 0.25
paths_per_start = 50

[girsanov]
drift = [1.0, 0.0]
times = [0.1, 0.25]
p_values = [2.0]
horizon = 0.25

[density]
time = 0.25
bins = 7
half_width = 2.5
drift = [1.0, -0.5]

[nvortex]
n = 64
steps = 3
dt = 0.001

[chaos]
ns = [32, 64]
replicas = 2
steps = 2
"#;

/// Subcommands exercised by the determinism criterion.
pub const DETERMINISM_SUBCOMMANDS: &[&str] = &[
    "constants",
    "simulate",
    "girsanov",
    "kop",
    "fixpoint",
    "density",
    "nvortex",
    "chaos",
];
