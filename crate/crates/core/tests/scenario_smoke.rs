//! End-to-end runs of every scenario at reduced scale: each test checks that
//! the runner completes, the manifest names every file with a correct hash,
//! every CSV parses back, and the plot script is present. Parameter choices
//! respect the same sampling guards as the defaults (coverage of the pair
//! kernel, receiver-plane chirp below Nyquist, halo inside the window).

use std::fs;
use std::path::PathBuf;

use twinbeam::io;
use twinbeam::scenario::{run_scenario, validate_config, RunManifest, ScenarioConfig};

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("twinbeam-smoke-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn run_toml(tag: &str, toml_text: &str) -> (PathBuf, RunManifest) {
    let dir = tmp_dir(tag);
    let mut cfg: ScenarioConfig = validate_config(toml_text).expect("config must validate");
    cfg.output_dir = dir.clone();
    let manifest = run_scenario(&cfg).expect("scenario must run");
    (dir, manifest)
}

fn check_outputs(dir: &PathBuf, manifest: &RunManifest) {
    assert!(!manifest.files.is_empty());
    assert!(manifest.files.iter().any(|f| f.name.ends_with(".csv")));
    assert!(manifest.files.iter().any(|f| f.name.starts_with("plot_")));
    assert!(dir.join("manifest.json").exists());
    for f in &manifest.files {
        let bytes = fs::read(dir.join(&f.name)).unwrap();
        assert_eq!(io::sha256_hex(&bytes), f.sha256, "{} hash mismatch", f.name);
        if f.name.ends_with(".csv") {
            let text = String::from_utf8(bytes).unwrap();
            let (cols, rows) = io::parse_csv(&text).unwrap();
            assert!(!cols.is_empty(), "{} has no columns", f.name);
            assert!(!rows.is_empty(), "{} has no rows", f.name);
        }
    }
    let _ = fs::remove_dir_all(dir);
}

#[test]
fn smoke_fig2() {
    let (dir, m) = run_toml(
        "fig2",
        r#"
scenario_id = "fig2_speckle_identity"
[params]
grid_n = 256
schmidt_k = 40.0
"#,
    );
    check_outputs(&dir, &m);
}

#[test]
fn smoke_fig3() {
    let (dir, m) = run_toml(
        "fig3",
        r#"
scenario_id = "fig3_dynamic"
[params]
grid_n = 128
schmidt_k = 5.0
n_segments = 4
phase_levels = 4
duration_s = 1.0
optimize_until_s = 0.6
"#,
    );
    check_outputs(&dir, &m);
}

#[test]
fn smoke_fig4b() {
    let (dir, m) = run_toml(
        "fig4b",
        r#"
scenario_id = "fig4b_beta_relation"
[params]
grid_n = 256
k_entangled = 40.0
n_segments = 4
phase_levels = 4
n_absorption_points = 5
"#,
    );
    check_outputs(&dir, &m);
}

#[test]
fn smoke_fig4c() {
    let (dir, m) = run_toml(
        "fig4c",
        r#"
scenario_id = "fig4c_corr_vs_K"
[params]
grid_n = 128
extent_m = 4e-3
k_values = [1.0, 5.0]
n_seeds = 2
"#,
    );
    check_outputs(&dir, &m);
}

#[test]
fn smoke_fig5b() {
    let (dir, m) = run_toml(
        "fig5b",
        r#"
scenario_id = "fig5b_double_diffuser"
[params]
grid_n = 512
n_segments = 4
phase_levels = 4
n_baseline_seeds = 2
n_displacements = 5
"#,
    );
    check_outputs(&dir, &m);
}

#[test]
fn smoke_fig5d() {
    let (dir, m) = run_toml(
        "fig5d",
        r#"
scenario_id = "fig5d_link_sweep"
[params]
grid_n = 8192
cn2_list = [4e-19]
n_lengths = 5
seeds_per_length = 1
n_subharmonics = 6
"#,
    );
    check_outputs(&dir, &m);
}

#[test]
fn smoke_fig_s1() {
    let (dir, m) = run_toml(
        "figS1",
        r#"
scenario_id = "figS1_pi_step"
[params]
grid_n = 256
schmidt_k = 40.0
"#,
    );
    check_outputs(&dir, &m);
}

#[test]
fn smoke_fig_s2() {
    let (dir, m) = run_toml(
        "figS2",
        r#"
scenario_id = "figS2_zrd_collapse"
[params]
grid_n = 512
grain_list_m = [60e-6]
ratio_list = [0.5, 2.0]
n_seeds = 1
n_segments = 4
phase_levels = 4
"#,
    );
    check_outputs(&dir, &m);
}

#[test]
fn smoke_fig_s3() {
    let (dir, m) = run_toml(
        "figS3",
        r#"
scenario_id = "figS3_memory_effect"
[params]
grid_n = 256
n_angles = 5
max_angle_rad = 0.012
"#,
    );
    check_outputs(&dir, &m);
}

#[test]
fn smoke_fig_s4() {
    let (dir, m) = run_toml(
        "figS4",
        r#"
scenario_id = "figS4_zra_collapse"
[params]
grid_n = 512
r0_list_m = [0.1]
ratio_list = [0.5, 2.0]
n_seeds = 1
n_subharmonics = 6
"#,
    );
    check_outputs(&dir, &m);
}

#[test]
fn smoke_fig_s5() {
    let (dir, m) = run_toml(
        "figS5",
        r#"
scenario_id = "figS5_lossy"
[params]
grid_n = 256
loss_list = [0.0, 1.0]
n_seeds = 2
n_segments = 4
phase_levels = 4
"#,
    );
    check_outputs(&dir, &m);
}

#[test]
fn smoke_fig_s7() {
    let (dir, m) = run_toml(
        "figS7",
        r#"
scenario_id = "figS7_scaling"
[params]
grid_n = 8192
cn2_list = [3e-19, 6e-19]
n_lengths = 6
seeds_per_length = 2
n_subharmonics = 6
"#,
    );
    check_outputs(&dir, &m);
}

#[test]
fn smoke_fig_s8() {
    let (dir, m) = run_toml(
        "figS8",
        r#"
scenario_id = "figS8_waist15cm"
[params]
grid_n = 2048
cn2_list = [1e-16]
n_lengths = 5
seeds_per_length = 1
n_subharmonics = 6
"#,
    );
    check_outputs(&dir, &m);
}

#[test]
fn smoke_schmidt() {
    let (dir, m) = run_toml(
        "schmidt",
        r#"
scenario_id = "schmidt_estimate"
[params]
svd_grid_n = 256
svd_k_list = [1.0, 10.0]
widths_grid_n = 512
widths_k = 100.0
"#,
    );
    check_outputs(&dir, &m);
}
