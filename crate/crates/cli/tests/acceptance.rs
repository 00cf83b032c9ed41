//! Desk-scale acceptance suite: one test per criterion, each printing a
//! pass/fail line (run with `--nocapture` to see the measured numbers).

use mvsde::accept::{self, CriterionReport};

fn check(rep: CriterionReport) {
    println!("{}", rep.summary());
    for line in &rep.lines {
        println!("    {line}");
    }
    assert!(rep.pass, "{} failed:\n{}", rep.name, rep.lines.join("\n"));
}

#[test]
fn criterion_1_girsanov_unit_mean() {
    check(accept::girsanov_unit_mean());
}

#[test]
fn criterion_2_weight_moment_bounds() {
    check(accept::weight_moment_bounds());
}

#[test]
fn criterion_3_density_representation() {
    check(accept::density_representation());
}

#[test]
fn criterion_4_density_perturbation() {
    check(accept::density_perturbation());
}

#[test]
fn criterion_5_cutoff_and_stability() {
    check(accept::kernel_moment_and_stability());
}

#[test]
fn criterion_6_operator_contraction() {
    check(accept::operator_contraction());
}

#[test]
fn criterion_7_constants_oracle() {
    check(accept::constants_oracle());
}

#[test]
fn criterion_8_particle_system() {
    check(accept::particle_system());
}

#[test]
fn criterion_9_artifact_determinism() {
    let bin = std::path::Path::new(env!("CARGO_BIN_EXE_mvsde"));
    check(accept::determinism(
        bin,
        mvsde_cli::DETERMINISM_SCENARIO,
        mvsde_cli::DETERMINISM_SUBCOMMANDS,
    ));
}
