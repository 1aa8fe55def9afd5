//! Acceptance suite. Prints one PASS/FAIL line per criterion, then fails
//! the test if any criterion failed. Runtime budgets are part of each
//! criterion. Run with `cargo test --test acceptance -- --nocapture` to see
//! the report.

use std::time::{Duration, Instant};

use rand::Rng;

use csir::aoa::{estimate_aoa, rank_with_candidates, stack_manifold, AoaConfig};
use csir::harness::{
    run_convergence_cell, run_nmse_sweep, run_spectrum_shapes, NmseRecord, ParamKind, SpectrumSpec, SweepSpec,
};
use csir::numerics::{cis, derive_seed, seeded_rng, wrap_pi, C64};
use csir::pipeline::{estimate_paths, DelayBranch, EstimatorConfig};
use csir::ratio::{taylor_deriv_k, RatioView};
use csir::signal::{
    generate_offsets, offset_factor, path_term, static_component, synthesize_csi, CsiTensor, OffsetModel, OffsetTrace,
    Path, PathSet, ScenarioSpec, SystemConfig,
};

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn iid_offsets() -> OffsetModel {
    OffsetModel::IidUniform { timing: (0.0, 0.3e-6), cfo: (-100.0, 100.0) }
}

/// Worst relative difference between every ratio `(m, g, n, q != 0)` of
/// two tensors.
fn worst_ratio_gap(a: &CsiTensor, b: &CsiTensor) -> f64 {
    let (va, vb) = (RatioView::with_floor(a, 0.0), RatioView::with_floor(b, 0.0));
    let (mc, gc, nc) = a.dims();
    let mut worst_sqr = 0.0f64;
    for m in 0..mc {
        for g in 0..gc {
            for n in 0..nc {
                for other in (0..nc).filter(|&o| o != n) {
                    let q = n as isize - other as isize;
                    let ra = va.ratio(n, q, m, g).unwrap();
                    let rb = vb.ratio(n, q, m, g).unwrap();
                    worst_sqr = worst_sqr.max((ra - rb).norm_sqr() / ra.norm_sqr());
                }
            }
        }
    }
    worst_sqr.sqrt()
}

fn offset_cancellation() -> Outcome {
    let cfg = SystemConfig::reference();
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let seed = derive_seed(1, trial);
        let mut rng = seeded_rng(seed);
        let scenario = ScenarioSpec::new(rng.random_range(1..=3), rng.random_range(1..=10));
        let paths = scenario.draw(&cfg, seed).map_err(|e| e.to_string())?;
        let clean = synthesize_csi(&cfg, &paths, &OffsetTrace::zero(cfg.packet_count), None).unwrap();
        for model in [iid_offsets(), OffsetModel::RandomWalk { timing_step: 2e-8, cfo_step: 20.0 }] {
            let offsets = generate_offsets(&model, cfg.packet_count, seed ^ 0x5a).unwrap();
            let shifted = synthesize_csi(&cfg, &paths, &offsets, None).unwrap();
            worst = worst.max(worst_ratio_gap(&clean, &shifted));
        }
    }
    let detail = format!("worst relative ratio change {worst:.2e} over 100 channels x 2 offset traces");
    if worst <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Central finite differences of `f` in the listed coordinates, one nested
/// difference per entry (repeats give higher pure derivatives).
fn nested_difference(f: &dyn Fn(&[C64]) -> C64, z: &[C64], coords: &[usize], step: f64) -> C64 {
    match coords.split_first() {
        None => f(z),
        Some((&i, rest)) => {
            let mut plus = z.to_vec();
            plus[i] += step;
            let mut minus = z.to_vec();
            minus[i] -= step;
            (nested_difference(f, &plus, rest, step) - nested_difference(f, &minus, rest, step)) / (2.0 * step)
        }
    }
}

fn derivative_oracles() -> Outcome {
    let cfg = SystemConfig::reference().with_packets(20).with_window(4);
    let (mc, gc, nc) = cfg.dims();
    let tolerances = [1e-5, 1e-4, 1e-3];
    let steps = [1e-6, 1e-4, 1e-3];
    let mut worst = [0.0f64; 3];
    for trial in 0..50u64 {
        let seed = derive_seed(2, trial);
        let paths = ScenarioSpec::new(3, 5).draw(&cfg, seed).unwrap();
        let offsets = generate_offsets(&iid_offsets(), mc, seed).unwrap();
        let y = synthesize_csi(&cfg, &paths, &offsets, None).unwrap();
        let mut rng = seeded_rng(seed ^ 0xd1);
        let n = rng.random_range(0..nc);
        let other = loop {
            let o = rng.random_range(0..nc);
            if o != n {
                break o;
            }
        };
        let q = n as isize - other as isize;
        let (m, g) = (rng.random_range(0..mc), rng.random_range(0..gc));
        let o = offset_factor(&cfg, &offsets, m, g);
        let statics: Vec<C64> = (0..nc).map(|a| paths.static_.iter().map(|p| path_term(&cfg, p, m, g, a)).sum()).collect();
        // the ratio as a function of the clean dynamic terms seen at antenna n
        let ratio = |z: &[C64]| {
            let sample = |a: usize| {
                let dynamic: C64 =
                    paths.dynamic.iter().zip(z).map(|(p, zl)| zl * cis((a as f64 - n as f64) * p.spatial_freq)).sum();
                (statics[a] + dynamic) * o
            };
            sample(n) / sample(other)
        };
        let z0: Vec<C64> = paths.dynamic.iter().map(|p| path_term(&cfg, p, m, g, n)).collect();
        let scale = y.get(m, g, other).norm();
        for order in 1..=3 {
            let coords: Vec<usize> = (0..order).map(|_| rng.random_range(0..paths.dynamic.len())).collect();
            let phis: Vec<f64> = coords.iter().map(|&l| paths.dynamic[l].spatial_freq).collect();
            let kernel = taylor_deriv_k(&y, n, q, m, g, &phis).map_err(|e| e.to_string())? * o.powu(order as u32);
            let fd = nested_difference(&ratio, &z0, &coords, steps[order - 1] * scale);
            worst[order - 1] = worst[order - 1].max((fd - kernel).norm() / kernel.norm());
        }
    }
    let detail = format!(
        "worst relative error k=1 {:.1e} (tol 1e-5), k=2 {:.1e} (tol 1e-4), k=3 {:.1e} (tol 1e-3) on 50 channels",
        worst[0], worst[1], worst[2]
    );
    if worst.iter().zip(&tolerances).all(|(w, t)| w <= t) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn convergence_numbers() -> Outcome {
    let cfg = SystemConfig::reference();
    let trials = 500;
    let los = run_convergence_cell(&cfg, &ScenarioSpec::new(1, 10).with_los(10.0), trials, 2, 3).map_err(|e| e.to_string())?;
    let mut ok = (0.90..=1.00).contains(&los.convergence_probability);
    let mut detail = format!(
        "LOS L=1 L_S=10: {:.3} (e_Tay {:.3}); L=L_S:",
        los.convergence_probability, los.error_proportion
    );
    for l in 1..=5 {
        let cell =
            run_convergence_cell(&cfg, &ScenarioSpec::new(l, l), trials, 2, derive_seed(3, l as u64)).map_err(|e| e.to_string())?;
        ok &= (0.35..=0.65).contains(&cell.convergence_probability);
        detail += &format!(" {l}:{:.3}", cell.convergence_probability);
    }
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn single_path_round_trip() -> Outcome {
    let cfg = SystemConfig::reference();
    let est_cfg = EstimatorConfig::for_system(&cfg);
    let tau_tol = cfg.symbol_duration / (4.0 * cfg.subcarrier_count as f64);
    let (f_step, phi_step) = (est_cfg.doppler.grid_step(), est_cfg.aoa.grid_step());
    let mut misses = Vec::new();
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for trial in 0..50u64 {
        let seed = derive_seed(4, trial);
        let paths = ScenarioSpec::new(1, 5).draw(&cfg, seed).unwrap();
        let offsets = generate_offsets(&iid_offsets(), cfg.packet_count, derive_seed(seed, 1)).unwrap();
        let y = synthesize_csi(&cfg, &paths, &offsets, None).unwrap();
        let est = estimate_paths(&y, &est_cfg, 1, Some(&static_component(&paths, &cfg)));
        let truth = &paths.dynamic[0];
        let Some(record) = est.paths.first().filter(|_| est.succeeded()) else {
            misses.push(format!("trial {trial}: {:?}", est.failure));
            continue;
        };
        let f_err = (record.f_d_hz - truth.doppler_hz).abs();
        let phi_err = wrap_pi(record.spatial_freq - truth.spatial_freq).abs();
        let tau_err = record.tau_s.map_or(f64::INFINITY, |t| (t - truth.delay_s).abs());
        worst = (worst.0.max(f_err), worst.1.max(phi_err), worst.2.max(tau_err));
        if f_err > f_step || phi_err > phi_step || tau_err > tau_tol {
            misses.push(format!("trial {trial}: df {f_err:.3} Hz, dphi {phi_err:.2e}, dtau {tau_err:.2e} s"));
        }
    }
    let detail = format!(
        "{}/50 within tolerance; worst df {:.2e} Hz, dphi {:.2e} rad, dtau {:.2e} s",
        50 - misses.len(),
        worst.0,
        worst.1,
        worst.2
    );
    if misses.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", misses.join("; ")))
    }
}

fn two_path_separation() -> Outcome {
    let cfg = SystemConfig::reference();
    let est_cfg = EstimatorConfig::for_system(&cfg);
    let (f_step, phi_step) = (est_cfg.doppler.grid_step(), est_cfg.aoa.grid_step());
    let tau_tol = cfg.symbol_duration / (2.0 * cfg.subcarrier_count as f64);
    let mut problems = Vec::new();
    let mut worst_zero = 0.0f64;
    let mut runs = 0;
    for gap in [None, Some(0.01e-6)] {
        for seed in 0..6u64 {
            runs += 1;
            let mut spec = SpectrumSpec::new(ScenarioSpec::new(2, 5), seed);
            spec.delay_gap_s = gap;
            let label = format!("seed {seed}{}", if gap.is_some() { " close" } else { "" });
            let shapes = match run_spectrum_shapes(&cfg, &est_cfg, &spec) {
                Ok(s) => s,
                Err(e) => {
                    problems.push(format!("{label}: {e}"));
                    continue;
                }
            };
            worst_zero = worst_zero.max(shapes.zero_hz_ratio);
            if shapes.zero_hz_ratio >= 0.1 {
                problems.push(format!("{label}: 0 Hz ratio {:.3}", shapes.zero_hz_ratio));
            }
            let truth = &shapes.truth.dynamic;
            let est = &shapes.estimate.paths;
            // match estimates to truth by Doppler
            let order = if (est[0].f_d_hz - truth[0].doppler_hz).abs() + (est[1].f_d_hz - truth[1].doppler_hz).abs()
                <= (est[0].f_d_hz - truth[1].doppler_hz).abs() + (est[1].f_d_hz - truth[0].doppler_hz).abs()
            {
                [0, 1]
            } else {
                [1, 0]
            };
            for (e, &t) in order.iter().enumerate() {
                let (record, path) = (&est[e], &truth[t]);
                if (record.f_d_hz - path.doppler_hz).abs() > 2.0 * f_step {
                    problems.push(format!("{label}: Doppler {:.2} vs {:.2}", record.f_d_hz, path.doppler_hz));
                }
                if wrap_pi(record.spatial_freq - path.spatial_freq).abs() > 2.0 * phi_step {
                    problems.push(format!("{label}: phi {:.4} vs {:.4}", record.spatial_freq, path.spatial_freq));
                }
                match record.tau_s {
                    Some(tau) if (tau - path.delay_s).abs() <= tau_tol => {}
                    other => problems.push(format!("{label}: tau {other:?} vs {:.4e}", path.delay_s)),
                }
                // each path's delay profile must peak at its own delay
                let profile = &shapes.delay_profiles[e];
                let peak = (0..profile.values.len()).max_by(|&a, &b| profile.values[a].total_cmp(&profile.values[b]));
                match peak.map(|i| profile.axis[i]) {
                    Some(at) if (at - path.delay_s).abs() <= tau_tol => {}
                    other => problems.push(format!("{label}: delay profile peak {other:?} vs {:.4e}", path.delay_s)),
                }
            }
        }
    }
    let detail = format!("{runs} runs (seeds 0-5, natural and 0.01 us gap); worst 0 Hz ratio {worst_zero:.3}");
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", problems.join("; ")))
    }
}

fn by_kind<'a>(records: &'a [NmseRecord], kind: ParamKind) -> impl Iterator<Item = &'a NmseRecord> {
    records.iter().filter(move |r| r.kind == kind)
}

fn nmse_trend() -> Outcome {
    let cfg = SystemConfig::reference();
    let est_cfg = EstimatorConfig::for_system(&cfg);
    let snr = vec![0.0, 5.0, 10.0, 15.0, 20.0];
    let mut ok = true;
    let mut detail = String::new();
    for (label, scenario, seed) in
        [("LOS", ScenarioSpec::new(1, 5).with_los(10.0), 61), ("NLOS", ScenarioSpec::new(1, 5), 62)]
    {
        let spec = SweepSpec::new(snr.clone(), 100, scenario, seed);
        let report = run_nmse_sweep(&cfg, &est_cfg, &spec).map_err(|e| e.to_string())?;
        let failures: usize = report.records.iter().map(|r| r.failures).sum();
        detail += &format!("{label} ({failures} failed trials):");
        for kind in ParamKind::ALL {
            let rows: Vec<&NmseRecord> = by_kind(&report.records, kind).collect();
            let finite = rows.iter().all(|r| r.nmse.is_finite() && r.ci_half_width.is_finite());
            let (low, high) = (rows[0], rows[rows.len() - 1]);
            // the half-width is 1.96 standard errors
            let sigma = (low.ci_half_width.powi(2) + high.ci_half_width.powi(2)).sqrt() / 1.96;
            let trend = high.nmse <= low.nmse + 2.0 * sigma;
            ok &= finite && trend;
            detail += &format!(" {} {:.2e}->{:.2e}{}", kind.name(), low.nmse, high.nmse, if trend { "" } else { " (rising)" });
            if !finite {
                detail += " (non-finite)";
            }
        }
        detail += "; ";
    }
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn trivial_solution_regime() -> Outcome {
    let cfg = SystemConfig::reference().with_antennas(2);
    // broadside statics are identical on both antennas and far stronger
    // than the dynamic path
    let static_ = (0..3).map(|i| Path::new(cis(1.3 * i as f64) * 1e4, 0.0, 0.1e-6 * i as f64, 0.0, &cfg)).collect();
    let dynamic = vec![Path::new(C64::new(0.6, 0.8), 110.0, 0.25e-6, 35f64.to_radians(), &cfg)];
    let paths = PathSet { dynamic, static_ };
    let y = synthesize_csi(&cfg, &paths, &OffsetTrace::zero(cfg.packet_count), None).unwrap();
    let ac = AoaConfig::for_system(&cfg);
    let est = estimate_aoa(&y, &ac, 1).map_err(|e| e.to_string())?;
    let manifold = stack_manifold(&y, ac.window, 0, 0).map_err(|e| e.to_string())?;
    let (plain, augmented) = rank_with_candidates(&manifold, &y, 0.0, 1e-6).map_err(|e| e.to_string())?;
    let pipeline = estimate_paths(&y, &EstimatorConfig::for_system(&cfg), 1, None);
    let peak_at_zero = est.spatial_freqs[0].abs() <= ac.grid_step();
    let detail = format!(
        "top peak phi {:.2e} (step {:.2e}), guard fired {}, dispersion {:.1e}, rank {plain} vs augmented {augmented}, branch {:?}",
        est.spatial_freqs[0],
        ac.grid_step(),
        est.guard.fired,
        est.guard.dispersion,
        pipeline.branch
    );
    if peak_at_zero && est.guard.fired && plain == augmented && pipeline.branch == Some(DelayBranch::Joint) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Shifting every delay by `x` is the same channel as adding `x` to the
/// timing offset, which the ratios cancel. The ratio check runs on the
/// absorbed form; synthesising the shifted paths directly rounds the larger
/// phases differently, so that comparison is reported but not gated.
fn delay_shift_invisible() -> Outcome {
    let cfg = SystemConfig::reference();
    let mut worst_ratio = 0.0f64;
    let mut worst_direct = 0.0f64;
    let mut worst_identity = 0.0f64;
    for trial in 0..10u64 {
        let seed = derive_seed(8, trial);
        let paths = ScenarioSpec::new(2, 5).draw(&cfg, seed).unwrap();
        let offsets = generate_offsets(&iid_offsets(), cfg.packet_count, seed).unwrap();
        let y = synthesize_csi(&cfg, &paths, &offsets, None).unwrap();
        let shift = 0.05e-6 + 0.5e-6 * trial as f64 / 10.0;
        let absorbed = OffsetTrace {
            timing_offset: offsets.timing_offset.iter().map(|t| t + shift).collect(),
            cfo: offsets.cfo.clone(),
        };
        let y_absorbed = synthesize_csi(&cfg, &paths, &absorbed, None).unwrap();
        worst_ratio = worst_ratio.max(worst_ratio_gap(&y, &y_absorbed));

        let moved = PathSet {
            dynamic: paths.dynamic.iter().map(|p| Path { delay_s: p.delay_s + shift, ..p.clone() }).collect(),
            static_: paths.static_.iter().map(|p| Path { delay_s: p.delay_s + shift, ..p.clone() }).collect(),
        };
        let y_moved = synthesize_csi(&cfg, &moved, &offsets, None).unwrap();
        let gap = y_moved.as_slice().iter().zip(y_absorbed.as_slice()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        worst_identity = worst_identity.max(gap / y.rms());
        worst_direct = worst_direct.max(worst_ratio_gap(&y, &y_moved));
    }
    let detail = format!(
        "worst relative ratio change {worst_ratio:.2e}; shifted paths equal the timing offset to {worst_identity:.2e} of rms; \
         direct shifted-path ratio change {worst_direct:.2e}"
    );
    if worst_ratio <= 1e-12 && worst_identity <= 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

#[test]
fn acceptance() {
    let criteria = [
        Criterion { id: 1, name: "offset cancellation", budget: Duration::from_secs(10), run: offset_cancellation },
        Criterion { id: 2, name: "derivative oracles", budget: Duration::from_secs(30), run: derivative_oracles },
        Criterion { id: 3, name: "convergence probability", budget: Duration::from_secs(120), run: convergence_numbers },
        Criterion { id: 4, name: "single-path round trip", budget: Duration::from_secs(60), run: single_path_round_trip },
        Criterion { id: 5, name: "two-path separation", budget: Duration::from_secs(60), run: two_path_separation },
        Criterion { id: 6, name: "NMSE trend and NLOS", budget: Duration::from_secs(600), run: nmse_trend },
        Criterion { id: 7, name: "trivial-solution regime", budget: Duration::from_secs(10), run: trivial_solution_regime },
        Criterion { id: 8, name: "delay non-identifiability", budget: Duration::from_secs(5), run: delay_shift_invisible },
    ];
    let only: Option<u32> = std::env::var("CSIR_ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = Vec::new();
    for c in criteria.iter().filter(|c| only.is_none_or(|id| id == c.id)) {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let in_time = elapsed <= c.budget;
        let (status, detail) = match (&outcome, in_time) {
            (Ok(d), true) => ("PASS", d.clone()),
            (Ok(d), false) => ("FAIL", format!("{d}; over time budget")),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        println!(
            "criterion {} {status}: {} | {} | {:.1} s of {} s",
            c.id,
            c.name,
            detail,
            elapsed.as_secs_f64(),
            c.budget.as_secs()
        );
        if status == "FAIL" {
            failed.push(c.id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
