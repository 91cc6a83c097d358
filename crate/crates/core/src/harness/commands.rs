//! One function per CLI command. Each resolves its defaults from a
//! [`RunConfig`], writes its report to `out` and warnings to `err`, and
//! returns the exit code for property outcomes (0 pass, 1 fail). Usage,
//! capacity and data problems come back as errors.

use std::io::Write;
use std::path::PathBuf;

use crate::anchor::{complexity_warning, fit_anchors, MultiHeadParams};
use crate::bench::{
    fit_scaling, run_sweep_with, sweep_cells, write_csv, write_jsonl, Mechanism, Precision,
    SweepSpec,
};
use crate::error::{Error, Result};
use crate::grad::{
    backward_anchor_attention, backward_anchor_attention_explicit, check_multi_head_block,
    multi_head_forward, ParamSet, FD_STEP_RANGE,
};
use crate::harness::anchors_fit::{
    clustered_keys, first_increase, initial_anchors, read_keys_csv, write_fit, FitInit,
};
use crate::harness::config::RunConfig;
use crate::harness::data::{load_idx, synthetic_task, SyntheticSpec};
use crate::harness::model::{train, ModelShape, TrainConfig};
use crate::harness::verify::{run_verify, thread_count, VerifyConfig};
use crate::linalg::Matrix;
use crate::seeded_rng;

/// Standard output and standard error of a command.
pub struct Console<'a> {
    pub out: &'a mut dyn Write,
    pub err: &'a mut dyn Write,
}

fn out_dir(cfg: &RunConfig, default: &str) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn positive(name: &str, v: usize) -> Result<usize> {
    if v == 0 {
        return Err(Error::Argument(format!("{name} must be >= 1")));
    }
    Ok(v)
}

pub const GRADCHECK_TOL: f64 = 1e-5;
pub const BACKWARD_AGREEMENT_TOL: f64 = 1e-10;

pub fn verify(cfg: &RunConfig, io: &mut Console) -> Result<i32> {
    let vc = VerifyConfig {
        seed: cfg.seed(),
        instances: positive(
            "instances",
            cfg.instances.unwrap_or(VerifyConfig::default().instances),
        )?,
        max_tokens: positive("n", cfg.n.unwrap_or(VerifyConfig::default().max_tokens))?,
        max_anchors: positive("m", cfg.m.unwrap_or(VerifyConfig::default().max_anchors))?,
        max_dim: positive("d", cfg.d.unwrap_or(VerifyConfig::default().max_dim))?,
        threads: thread_count()?,
        poison_delta: RunConfig::flag(cfg.poison_delta),
    };
    let report = run_verify(&vc)?;
    io.out.write_all(report.render().as_bytes())?;
    Ok(if report.passed() { 0 } else { 1 })
}

/// Resolved gradcheck settings. Shapes default to a small 2-head block
/// rather than the global anchor count.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckSettings {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub input_dim: usize,
    pub heads: usize,
    pub step: f64,
    pub tol: f64,
    pub zero_init: bool,
    pub share_anchors: bool,
    pub seed: u64,
}

impl GradcheckSettings {
    /// Resolves defaults; a step outside the recommended band is clamped
    /// into it and reported in the returned warning.
    pub fn resolve(cfg: &RunConfig) -> Result<(Self, Option<String>)> {
        let raw = cfg.step.unwrap_or(1e-5);
        if !(raw.is_finite() && raw > 0.0) {
            return Err(Error::Argument(format!(
                "step must be finite and > 0, got {raw}"
            )));
        }
        let step = raw.clamp(FD_STEP_RANGE.0, FD_STEP_RANGE.1);
        let warning = (step != raw).then(|| {
            format!(
                "warning: step {raw:e} is outside the recommended band [{:e}, {:e}]; using {step:e}",
                FD_STEP_RANGE.0, FD_STEP_RANGE.1
            )
        });
        let s = GradcheckSettings {
            n: positive("n", cfg.n.unwrap_or(8))?,
            m: positive("m", cfg.m.unwrap_or(4))?,
            d: positive("d", cfg.d.unwrap_or(4))?,
            input_dim: positive("input-dim", cfg.input_dim.unwrap_or(6))?,
            heads: positive("heads", cfg.heads.unwrap_or(2))?,
            step,
            tol: cfg.tol.unwrap_or(GRADCHECK_TOL),
            zero_init: RunConfig::flag(cfg.zero_init),
            share_anchors: RunConfig::flag(cfg.share_anchors),
            seed: cfg.seed(),
        };
        Ok((s, warning))
    }
}

/// Per-parameter FD errors plus the largest gap between the two backward
/// derivations over all heads.
#[derive(Debug, Clone)]
pub struct GradcheckOutcome {
    pub reports: Vec<crate::grad::FdCheckReport>,
    pub backward_gap: f64,
}

pub fn run_gradcheck(s: &GradcheckSettings) -> Result<GradcheckOutcome> {
    let mut rng = seeded_rng(s.seed);
    let mut params = MultiHeadParams::random(s.input_dim, s.d, s.heads, s.m, &mut rng);
    params.share_anchors = s.share_anchors;
    if s.zero_init {
        for p in params.params_mut() {
            *p = Matrix::zeros(p.rows(), p.cols());
        }
    }
    let x = Matrix::random_normal(s.n, s.input_dim, 1.0, &mut rng);
    let weights = Matrix::random_normal(s.n, s.d, 1.0, &mut rng);
    let reports = check_multi_head_block(&x, &params, &weights, s.step)?;

    let fwd = multi_head_forward(&x, &params)?;
    let per_head_upstream = crate::linalg::split_cols(
        &crate::matmul(&weights, &crate::transpose(&params.w_out))?,
        s.d,
    )?;
    let mut gap = 0.0f64;
    for (cache, g) in fwd.heads.iter().zip(&per_head_upstream) {
        let fast = backward_anchor_attention(&cache.anchor, g)?;
        let explicit = backward_anchor_attention_explicit(&cache.anchor, g)?;
        gap = gap
            .max(fast.d_ws.max_abs_diff(&explicit.d_ws)?)
            .max(fast.d_k.max_abs_diff(&explicit.d_k)?)
            .max(fast.d_v.max_abs_diff(&explicit.d_v)?);
    }
    Ok(GradcheckOutcome {
        reports,
        backward_gap: gap,
    })
}

pub fn gradcheck(cfg: &RunConfig, io: &mut Console) -> Result<i32> {
    let (s, warning) = GradcheckSettings::resolve(cfg)?;
    if let Some(w) = warning {
        writeln!(io.err, "{w}")?;
    }
    let outcome = run_gradcheck(&s)?;
    writeln!(
        io.out,
        "gradcheck n={} m={} d={} input_dim={} heads={} step={:e} tol={:e}{}{}",
        s.n,
        s.m,
        s.d,
        s.input_dim,
        s.heads,
        s.step,
        s.tol,
        if s.zero_init { " zero-init" } else { "" },
        if s.share_anchors {
            " shared-anchors"
        } else {
            ""
        },
    )?;
    let mut ok = true;
    for r in &outcome.reports {
        let pass = r.passes(s.tol);
        ok &= pass;
        writeln!(
            io.out,
            "{:<5} {:<14} max_rel_error={:.3e} entries={} worst_index={}",
            if pass { "PASS" } else { "FAIL" },
            r.param,
            r.max_rel_error,
            r.count,
            r.worst_index
        )?;
    }
    let agree = outcome.backward_gap <= BACKWARD_AGREEMENT_TOL;
    ok &= agree;
    writeln!(
        io.out,
        "{:<5} backward paths agree: max |fast - explicit| = {:.3e} (tol {:e})",
        if agree { "PASS" } else { "FAIL" },
        outcome.backward_gap,
        BACKWARD_AGREEMENT_TOL
    )?;
    Ok(if ok { 0 } else { 1 })
}

pub fn sweep_spec(cfg: &RunConfig) -> Result<SweepSpec> {
    let base = SweepSpec::default();
    Ok(SweepSpec {
        mechanisms: cfg.mechanisms.clone().unwrap_or(base.mechanisms),
        ns: cfg.ns.clone().unwrap_or(base.ns),
        ms: cfg.ms.clone().unwrap_or_else(|| vec![cfg.anchors()]),
        ds: vec![cfg.d.unwrap_or(64)],
        heads: positive("heads", cfg.heads.unwrap_or(1))?,
        reps: cfg.reps.unwrap_or(base.reps),
        warmup: cfg.warmup.unwrap_or(base.warmup),
        seed: cfg.seed(),
        precision: if RunConfig::flag(cfg.f32) {
            Precision::F32
        } else {
            Precision::F64
        },
        parallel_heads: RunConfig::flag(cfg.parallel),
        memory_ceiling: cfg.memory_ceiling.unwrap_or(base.memory_ceiling),
    })
}

pub fn bench(cfg: &RunConfig, io: &mut Console) -> Result<i32> {
    let spec = sweep_spec(cfg)?;
    let cells = sweep_cells(&spec)?;
    for c in &cells {
        if c.mechanism != Mechanism::Vanilla {
            if let Some(w) = complexity_warning(c.n, c.m) {
                writeln!(io.err, "warning: cell {c}: {w}")?;
            }
        }
    }
    if RunConfig::flag(cfg.dry_run) {
        writeln!(io.out, "dry run: {} cells, nothing written", cells.len())?;
        for c in &cells {
            writeln!(
                io.out,
                "{c} flops={}",
                c.mechanism.flops(c.n, c.m, c.d) * spec.heads as u64
            )?;
        }
        return Ok(0);
    }
    let records = run_sweep_with(&spec, |r| {
        let _ = writeln!(
            io.err,
            "{} n={} m={} d={} median={:.3} ms",
            r.mechanism,
            r.n,
            r.m,
            r.d,
            r.wall_ns_median as f64 / 1e6
        );
    })?;
    let dir = out_dir(cfg, "bench_out");
    std::fs::create_dir_all(&dir)?;
    write_csv(std::fs::File::create(dir.join("bench.csv"))?, &records)?;
    write_jsonl(std::fs::File::create(dir.join("bench.jsonl"))?, &records)?;
    writeln!(
        io.out,
        "wrote {} records to {}",
        records.len(),
        dir.display()
    )?;
    let distinct_n = {
        let mut ns = spec.ns.clone();
        ns.sort_unstable();
        ns.dedup();
        ns.len()
    };
    if distinct_n >= 4 {
        for f in fit_scaling(&records)? {
            writeln!(
                io.out,
                "{} m={} d={} heads={}: slope={:.3} r2={:.4} over n={}..{}{}",
                f.mechanism,
                f.m,
                f.d,
                f.heads,
                f.slope,
                f.r_squared,
                f.n_min,
                f.n_max,
                if f.conclusive() {
                    ""
                } else {
                    " (inconclusive: r2 < 0.9)"
                }
            )?;
        }
    } else {
        writeln!(io.out, "scaling fit skipped: needs at least 4 distinct n")?;
    }
    Ok(0)
}

pub fn demo_train(cfg: &RunConfig, io: &mut Console) -> Result<i32> {
    let seed = cfg.seed();
    let data = match (&cfg.idx_images, &cfg.idx_labels) {
        (Some(images), Some(labels)) => {
            load_idx(images, labels, positive("patch", cfg.patch.unwrap_or(7))?)?
        }
        (None, None) => {
            let base = SyntheticSpec::default();
            let spec = SyntheticSpec {
                samples: cfg.samples.unwrap_or(base.samples),
                classes: cfg.classes.unwrap_or(base.classes),
                tokens: cfg.n.unwrap_or(base.tokens),
                token_dim: cfg.input_dim.unwrap_or(base.token_dim),
                ..base
            };
            synthetic_task(&spec, &mut seeded_rng(seed))?
        }
        _ => {
            return Err(Error::Argument(
                "--idx-images and --idx-labels must be given together".into(),
            ))
        }
    };
    if data.classes < 2 {
        return Err(Error::Argument(format!(
            "dataset has {} class(es); need at least 2",
            data.classes
        )));
    }
    let shape = ModelShape {
        token_dim: data.token_dim(),
        model_dim: positive("d", cfg.d.unwrap_or(8))?,
        heads: positive("heads", cfg.heads.unwrap_or(2))?,
        anchors: positive("m", cfg.anchors())?,
        blocks: 2,
        classes: data.classes,
    };
    let base = TrainConfig::default();
    let tc = TrainConfig {
        epochs: cfg.epochs.unwrap_or(base.epochs),
        lr: cfg.lr.unwrap_or(base.lr),
        batch: cfg.batch.unwrap_or(base.batch),
        seed,
        ..base
    };
    writeln!(
        io.out,
        "demo-train samples={} tokens={} token_dim={} classes={} d={} heads={} m={} epochs={} lr={} batch={} seed={}",
        data.len(),
        data.tokens(),
        data.token_dim(),
        data.classes,
        shape.model_dim,
        shape.heads,
        shape.anchors,
        tc.epochs,
        tc.lr,
        tc.batch,
        seed
    )?;
    let report = {
        let out = &mut *io.out;
        train(&data, &shape, &tc, |e| {
            let _ = writeln!(
                out,
                "epoch {:>3} loss={:.6} train_acc={:.4} holdout_acc={:.4}",
                e.epoch, e.loss, e.train_accuracy, e.holdout_accuracy
            );
        })?
    };
    for w in &report.warnings {
        writeln!(io.err, "warning: {w}")?;
    }
    let train_acc = report.epochs.last().map(|e| e.train_accuracy);
    writeln!(
        io.out,
        "final train_acc={} holdout_acc={:.4} (train {} / holdout {}, untrained holdout_acc={:.4})",
        train_acc.map_or("n/a".to_string(), |a| format!("{a:.4}")),
        report.final_holdout_accuracy(),
        report.train_size,
        report.holdout_size,
        report.initial_holdout_accuracy
    )?;
    Ok(0)
}

pub fn anchors_fit(cfg: &RunConfig, io: &mut Console) -> Result<i32> {
    let mut rng = seeded_rng(cfg.seed());
    let keys = match &cfg.keys {
        Some(path) => read_keys_csv(path)?,
        None => clustered_keys(
            positive("n", cfg.n.unwrap_or(300))?,
            cfg.d.unwrap_or(2),
            positive("clusters", cfg.clusters.unwrap_or(3))?,
            6.0,
            0.5,
            &mut rng,
        )?,
    };
    let m = positive("m", cfg.anchors())?;
    if let Some(w) = complexity_warning(keys.rows(), m) {
        writeln!(io.err, "warning: {w}")?;
    }
    let init: FitInit = cfg.init.as_deref().unwrap_or("gaussian").parse()?;
    let iters = cfg.iters.unwrap_or(20);
    let start = initial_anchors(&keys, m, init, &mut rng)?;
    let fit = fit_anchors(&keys, start, iters)?;
    let dir = out_dir(cfg, "anchors_out");
    write_fit(&dir, &fit)?;
    writeln!(
        io.out,
        "anchors-fit n={} d={} m={} iterations={}",
        keys.rows(),
        keys.cols(),
        m,
        iters
    )?;
    for (t, v) in fit.objective.iter().enumerate() {
        writeln!(io.out, "iteration {t:>3} objective={v:.12e}")?;
    }
    writeln!(
        io.out,
        "wrote anchors.bin, anchors.csv, objective.csv to {}",
        dir.display()
    )?;
    match first_increase(&fit.objective) {
        None => Ok(0),
        Some(t) => {
            writeln!(
                io.out,
                "FAIL objective increased at iteration {t}: {:e} -> {:e}",
                fit.objective[t - 1],
                fit.objective[t]
            )?;
            Ok(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(
        f: fn(&RunConfig, &mut Console) -> Result<i32>,
        cfg: &RunConfig,
    ) -> (Result<i32>, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = f(
            cfg,
            &mut Console {
                out: &mut out,
                err: &mut err,
            },
        );
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn gradcheck_defaults_pass() {
        let (code, out, err) = run(gradcheck, &RunConfig::default());
        assert_eq!(code.unwrap(), 0, "{out}");
        assert!(err.is_empty());
        assert!(out.starts_with("gradcheck n=8 m=4 d=4 input_dim=6 heads=2"));
        assert_eq!(out.matches("PASS").count(), 2 * 4 + 2 + 1);
    }

    #[test]
    fn gradcheck_clamps_wild_steps() {
        let cfg = RunConfig {
            step: Some(1e-2),
            ..Default::default()
        };
        let (s, w) = GradcheckSettings::resolve(&cfg).unwrap();
        assert_eq!(s.step, 1e-3);
        assert!(w.unwrap().contains("outside the recommended band"));
        let (_, _, err) = run(gradcheck, &cfg);
        assert!(err.contains("warning"));
    }

    #[test]
    fn gradcheck_zero_init_and_shared_anchors_pass() {
        for cfg in [
            RunConfig {
                zero_init: Some(true),
                ..Default::default()
            },
            RunConfig {
                share_anchors: Some(true),
                ..Default::default()
            },
        ] {
            let (code, out, _) = run(gradcheck, &cfg);
            assert_eq!(code.unwrap(), 0, "{out}");
        }
    }

    #[test]
    fn bench_dry_run_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            dry_run: Some(true),
            out: Some(dir.path().join("b")),
            ns: Some(vec![8, 16]),
            m: Some(12),
            ..Default::default()
        };
        let (code, out, err) = run(bench, &cfg);
        assert_eq!(code.unwrap(), 0);
        assert!(out.contains("dry run: 4 cells"));
        assert!(err.contains("m = 12 >= n = 8"));
        assert!(!dir.path().join("b").exists());
    }

    #[test]
    fn bench_capacity_error_names_the_cell() {
        let cfg = RunConfig {
            ns: Some(vec![4096]),
            memory_ceiling: Some(1 << 20),
            ..Default::default()
        };
        let err = run(bench, &cfg).0.unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("vanilla"), "{err}");
    }

    #[test]
    fn anchors_fit_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            out: Some(dir.path().to_path_buf()),
            m: Some(3),
            init: Some("first".into()),
            ..Default::default()
        };
        let (code, out, _) = run(anchors_fit, &cfg);
        assert_eq!(code.unwrap(), 0, "{out}");
        assert_eq!(out.matches("objective=").count(), 21);
        assert!(dir.path().join("anchors.bin").exists());
        let bad = RunConfig {
            init: Some("nope".into()),
            ..cfg
        };
        assert_eq!(run(anchors_fit, &bad).0.unwrap_err().exit_code(), 2);
    }
}
