use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use serde_json::{json, Value};
use sparsescape::data::load_split;
use sparsescape::landscape::{
    build_plane, eval_grid, linspace, top_k_eigenvalues, values_digest, EigenPair, ErrorField, FieldEvaluator,
    FieldKind, HessianField, LossField,
};
use sparsescape::nn::{Checkpoint, TrainData};
use sparsescape::pruning::{
    gradual_prune, one_shot_prune, one_shot_prune_count, random_structure, retrain as retrain_masked, rewind, RetrainStrategy,
};
use sparsescape::psp::{capture_states, first_order_entropy, psp_l2, second_order_entropy, EntropyField, PspL2Field};
use sparsescape::{Error, LabeledDataset, Network, ParamVector, PruneMask, Split, TrainRecord};

use crate::config::{ExperimentConfig, PruneMethod, StrategyName};
use crate::heatmap;
use crate::output::RunOutput;
use crate::Common;

pub struct Context {
    pub threads: usize,
    pub data: Option<PathBuf>,
}

const DEFAULT_DATA: &str = "data/mnist";

impl Context {
    /// `--data` flag, then `SPARSESCAPE_DATA`, then `data.root`, then `data/mnist`.
    fn data_root(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.data
            .clone()
            .or_else(|| std::env::var_os("SPARSESCAPE_DATA").map(PathBuf::from))
            .or_else(|| cfg.data.root.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA))
    }

    fn load(&self, cfg: &ExperimentConfig, split: Split) -> Result<LabeledDataset> {
        let root = self.data_root(cfg);
        let ds = load_split(&root, split, cfg.data.normalization)
            .with_context(|| format!("loading {split:?} split from {}", root.display()))?;
        let limit = match split {
            Split::Train => cfg.data.train_limit,
            Split::Test => cfg.data.test_limit,
        };
        Ok(match limit {
            Some(n) => ds.take(n),
            None => ds,
        })
    }
}

struct Run {
    cfg: ExperimentConfig,
    net: Network,
    out: RunOutput,
}

fn start(common: &Common, extra: &[String]) -> Result<Run> {
    let mut overrides = common.overrides.clone();
    overrides.extend_from_slice(extra);
    let cfg = ExperimentConfig::load(common.config.as_deref(), &overrides)?;
    let net = Network::preset(&cfg.model)?;
    let mut out = RunOutput::new(&common.out)?;
    if let Some(p) = &common.config {
        out.input(p)?;
    }
    out.write("config.toml", cfg.to_toml().as_bytes())?;
    Ok(Run { cfg, net, out })
}

fn finish(run: Run, ctx: &Context, command: &str, summary: Value) -> Result<()> {
    let root = ctx.data_root(&run.cfg);
    run.out.finish(command, ctx.threads, Some(&root), &run.cfg, summary)
}

fn read_checkpoint(out: &mut RunOutput, net: &Network, path: &Path) -> Result<(ParamVector<f32>, Option<PruneMask>)> {
    let bytes = out.input(path)?;
    let ck = Checkpoint::from_bytes(&bytes).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let params = ck.params_for(net)?;
    Ok((params, ck.prune_mask()))
}

fn read_mask(out: &mut RunOutput, path: &Path) -> Result<PruneMask> {
    let bytes = out.input(path)?;
    PruneMask::from_bytes(&bytes).with_context(|| format!("reading mask {}", path.display()))
}

fn write_checkpoint(out: &mut RunOutput, name: &str, net: &Network, p: &ParamVector<f32>, mask: Option<&PruneMask>) -> Result<()> {
    out.write(name, &Checkpoint::new(&net.config().name, p, mask).to_bytes())?;
    Ok(())
}

fn write_record(out: &mut RunOutput, net: &Network, rec: &TrainRecord, mask: Option<&PruneMask>) -> Result<()> {
    write_checkpoint(out, "init.ssck", net, &rec.initial, None)?;
    write_checkpoint(out, "final.ssck", net, &rec.final_params, mask)?;
    if let Some((step, p)) = &rec.snapshot {
        write_checkpoint(out, &format!("snapshot_{step}.ssck"), net, p, None)?;
    }
    out.write("metrics.csv", rec.metrics_csv().as_bytes())?;
    Ok(())
}

fn mask_summary(net: &Network, mask: &PruneMask) -> Value {
    json!({
        "pruned": mask.pruned_count(),
        "compression_all": mask.compression_rate(),
        "compression_weights": mask.weight_compression(net.layout()),
        "provenance": mask.provenance,
    })
}

pub fn train(ctx: &Context, common: &Common, epochs: Option<usize>, seed: Option<u64>) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(e) = epochs {
        extra.push(format!("train.epochs={e}"));
    }
    if let Some(s) = seed {
        extra.push(format!("train.seed={s}"));
    }
    let mut run = start(common, &extra)?;
    let train_ds = ctx.load(&run.cfg, Split::Train)?;
    let test_ds = ctx.load(&run.cfg, Split::Test)?;
    let init = run.net.init_params(run.cfg.train.seed);
    let data = TrainData { train: &train_ds, test: &test_ds };
    match sparsescape::nn::train(&run.net, &init, data, &run.cfg.train, None) {
        Ok(rec) => {
            write_record(&mut run.out, &run.net, &rec, None)?;
            let summary = json!({
                "epochs": rec.epochs.len(),
                "final_test_accuracy": rec.final_test_accuracy(),
                "params": run.net.num_params(),
            });
            finish(run, ctx, "train", summary)
        }
        Err(Error::Diverged { epoch, loss, record }) => {
            write_record(&mut run.out, &run.net, &record, None)?;
            let summary = json!({ "diverged_epoch": epoch, "loss": loss.to_string() });
            finish(run, ctx, "train", summary)?;
            Err(Error::Diverged { epoch, loss, record }.into())
        }
        Err(e) => Err(e.into()),
    }
}

pub fn prune(
    ctx: &Context,
    common: &Common,
    method: Option<PruneMethod>,
    trained: Option<&Path>,
    init: Option<&Path>,
    fraction: Option<f64>,
    count: Option<usize>,
) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(m) = method {
        extra.push(format!("prune.method=\"{}\"", if m == PruneMethod::Gradual { "gradual" } else { "oneshot" }));
    }
    if let Some(f) = fraction {
        extra.push(format!("prune.fraction={f:?}"));
    }
    if let Some(c) = count {
        extra.push(format!("prune.count={c}"));
    }
    let mut run = start(common, &extra)?;
    match run.cfg.prune.method {
        PruneMethod::Oneshot => {
            let path = trained.context("one-shot pruning needs --trained <checkpoint>")?;
            let (params, _) = read_checkpoint(&mut run.out, &run.net, path)?;
            let mask = match run.cfg.prune.count {
                Some(c) => one_shot_prune_count(&params, c)?,
                None => one_shot_prune(&params, run.cfg.prune.fraction)?,
            };
            let mut pruned = params.clone();
            mask.apply(pruned.values_mut());
            run.out.write("mask.ssmk", &mask.to_bytes())?;
            write_checkpoint(&mut run.out, "pruned.ssck", &run.net, &pruned, Some(&mask))?;
            let test_ds = ctx.load(&run.cfg, Split::Test)?;
            let acc = run.net.evaluate(pruned.values(), &test_ds)?.accuracy;
            let mut summary = mask_summary(&run.net, &mask);
            summary["test_accuracy_before_retraining"] = json!(acc);
            finish(run, ctx, "prune", summary)
        }
        PruneMethod::Gradual => {
            let start_params = match init {
                Some(p) => read_checkpoint(&mut run.out, &run.net, p)?.0,
                None => run.net.init_params(run.cfg.train.seed),
            };
            let train_ds = ctx.load(&run.cfg, Split::Train)?;
            let test_ds = ctx.load(&run.cfg, Split::Test)?;
            let data = TrainData { train: &train_ds, test: &test_ds };
            write_checkpoint(&mut run.out, "init.ssck", &run.net, &start_params, None)?;
            match gradual_prune(&run.net, &start_params, data, &run.cfg.train, &run.cfg.prune.schedule) {
                Ok(o) => {
                    run.out.write("mask.ssmk", &o.mask.to_bytes())?;
                    write_checkpoint(&mut run.out, "final.ssck", &run.net, &o.params, Some(&o.mask))?;
                    run.out.write("trajectory.csv", o.trajectory_csv().as_bytes())?;
                    run.out.write("metrics.csv", sparsescape::nn::metrics_csv(&o.epochs).as_bytes())?;
                    let mut summary = mask_summary(&run.net, &o.mask);
                    summary["final_test_accuracy"] = json!(o.final_test_accuracy());
                    summary["baseline_accuracy"] = json!(o.baseline_accuracy);
                    summary["events"] = json!(o.events);
                    summary["halt"] = json!(o.halt);
                    finish(run, ctx, "prune", summary)
                }
                Err(Error::PruningCollapsed { step, partial }) => {
                    run.out.write("trajectory.csv", partial.trajectory_csv().as_bytes())?;
                    run.out.write("mask.ssmk", &partial.mask.to_bytes())?;
                    let summary = json!({ "collapsed_at_step": step });
                    finish(run, ctx, "prune", summary)?;
                    Err(Error::PruningCollapsed { step, partial }.into())
                }
                Err(e) => Err(e.into()),
            }
        }
    }
}

pub fn retrain(
    ctx: &Context,
    common: &Common,
    mask_path: &Path,
    init_path: &Path,
    trained: Option<&Path>,
    strategy: Option<StrategyName>,
    seed: Option<u64>,
) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(s) = strategy {
        let name = match s {
            StrategyName::Rewind => "rewind",
            StrategyName::Reinit => "reinit",
            StrategyName::Finetune => "finetune",
            StrategyName::RandomStructure => "random_structure",
        };
        extra.push(format!("retrain.strategy=\"{name}\""));
    }
    if let Some(s) = seed {
        extra.push(format!("retrain.seed={s}"));
    }
    let mut run = start(common, &extra)?;
    let mask = read_mask(&mut run.out, mask_path)?;
    let (init, _) = read_checkpoint(&mut run.out, &run.net, init_path)?;
    let trained = match trained {
        Some(p) => Some(read_checkpoint(&mut run.out, &run.net, p)?.0),
        None => None,
    };
    let mut tcfg = run.cfg.train.clone();
    if let Some(e) = run.cfg.retrain.epochs {
        tcfg.epochs = e;
    }
    let train_ds = ctx.load(&run.cfg, Split::Train)?;
    let test_ds = ctx.load(&run.cfg, Split::Test)?;
    let data = TrainData { train: &train_ds, test: &test_ds };
    let seed = run.cfg.retrain.seed;
    let (mask, result) = match run.cfg.retrain.strategy {
        StrategyName::RandomStructure => {
            let m = random_structure(run.net.layout(), &mask, seed)?;
            let start = rewind(&m, &init)?;
            let r = sparsescape::nn::train(&run.net, &start, data, &tcfg, Some(&m));
            (m, r)
        }
        s => {
            let strategy = match s {
                StrategyName::Rewind => RetrainStrategy::RewindToInit,
                StrategyName::Reinit => RetrainStrategy::RandomReinit { seed },
                _ => RetrainStrategy::FineTune,
            };
            let r = retrain_masked(&run.net, strategy, &mask, Some(&init), trained.as_ref(), data, &tcfg);
            (mask, r)
        }
    };
    run.out.write("mask.ssmk", &mask.to_bytes())?;
    match result {
        Ok(rec) => {
            write_record(&mut run.out, &run.net, &rec, Some(&mask))?;
            let mut summary = mask_summary(&run.net, &mask);
            summary["final_test_accuracy"] = json!(rec.final_test_accuracy());
            summary["strategy"] = json!(run.cfg.retrain.strategy);
            finish(run, ctx, "retrain", summary)
        }
        Err(Error::Diverged { epoch, loss, record }) => {
            write_record(&mut run.out, &run.net, &record, Some(&mask))?;
            finish(run, ctx, "retrain", json!({ "diverged_epoch": epoch }))?;
            Err(Error::Diverged { epoch, loss, record }.into())
        }
        Err(e) => Err(e.into()),
    }
}

/// The dataset a PSP or Hessian computation runs on, with the recorded subset.
fn analysis_data(
    ctx: &Context,
    cfg: &ExperimentConfig,
    split: Split,
    subset: Option<usize>,
    seed: u64,
) -> Result<(LabeledDataset, Value)> {
    let full = ctx.load(cfg, split)?;
    Ok(match subset {
        Some(n) if n < full.len() => {
            let (ds, idx) = full.seeded_subset(n, seed);
            let bytes: Vec<u8> = idx.iter().flat_map(|&i| (i as u64).to_le_bytes()).collect();
            let meta = json!({
                "split": split, "samples": ds.len(), "subset_seed": seed,
                "indices_sha256": crate::output::sha256_hex(&bytes),
            });
            (ds, meta)
        }
        _ => {
            let meta = json!({ "split": split, "samples": full.len() });
            (full, meta)
        }
    })
}

fn hessian_data(ctx: &Context, cfg: &ExperimentConfig) -> Result<(LabeledDataset, Value)> {
    analysis_data(ctx, cfg, cfg.hessian.split, Some(cfg.hessian.subset), cfg.hessian.subset_seed)
}

fn psp_data(ctx: &Context, cfg: &ExperimentConfig) -> Result<(LabeledDataset, Value)> {
    analysis_data(ctx, cfg, cfg.psp.split, cfg.psp.subset, cfg.psp.subset_seed)
}

pub fn plane(ctx: &Context, common: &Common, a_path: &Path, b_path: &Path) -> Result<()> {
    let mut run = start(common, &[])?;
    let (a, _) = read_checkpoint(&mut run.out, &run.net, a_path)?;
    let (b, _) = read_checkpoint(&mut run.out, &run.net, b_path)?;
    let pc = run.cfg.plane.clone();
    let plane = build_plane(&a, &b, pc.seed)?;
    let alphas = linspace(pc.alpha[0], pc.alpha[1], pc.steps);
    let betas = linspace(pc.beta[0], pc.beta[1], pc.steps);
    let (train_ds, train_meta) = analysis_data(ctx, &run.cfg, Split::Train, pc.subset, pc.subset_seed)?;
    let needs_test = pc.fields.contains(&FieldKind::TestError);
    let test_ds = if needs_test { Some(ctx.load(&run.cfg, Split::Test)?) } else { None };
    let needs_psp = pc.fields.iter().any(|f| matches!(f, FieldKind::PspL2 | FieldKind::PspEntropy1 | FieldKind::PspEntropy2));
    let psp = if needs_psp { Some(psp_data(ctx, &run.cfg)?) } else { None };
    let hess = if pc.fields.contains(&FieldKind::HessianTopk) { Some(hessian_data(ctx, &run.cfg)?) } else { None };

    let mut fields_meta = serde_json::Map::new();
    for &kind in &pc.fields {
        let evaluator: Box<dyn FieldEvaluator> = match kind {
            FieldKind::TrainLoss => Box::new(LossField { net: &run.net, data: &train_ds }),
            FieldKind::TestError => Box::new(ErrorField { net: &run.net, data: test_ds.as_ref().expect("loaded") }),
            FieldKind::PspL2 => Box::new(PspL2Field { net: &run.net, data: &psp.as_ref().expect("loaded").0 }),
            FieldKind::PspEntropy1 | FieldKind::PspEntropy2 => Box::new(EntropyField {
                net: &run.net,
                data: &psp.as_ref().expect("loaded").0,
                order: if kind == FieldKind::PspEntropy1 { 1 } else { 2 },
                selection: run.cfg.psp.selection(),
                aggregation: run.cfg.psp.aggregation,
            }),
            FieldKind::HessianTopk => Box::new(HessianField {
                net: &run.net,
                data: &hess.as_ref().expect("loaded").0,
                config: run.cfg.hessian.eigen(),
            }),
        };
        let grid = eval_grid(&plane, &alphas, &betas, evaluator.as_ref())?;
        run.out.write(&format!("grid_{kind}.csv"), grid.to_csv().as_bytes())?;
        let range = if pc.heatmap {
            let (png, range) = heatmap::render(&grid)?;
            run.out.write(&format!("grid_{kind}.png"), &png)?;
            range
        } else {
            grid.range()
        };
        let (ia, ib) = (alphas.iter().position(|&x| x == 0.0), alphas.iter().position(|&x| x == 1.0));
        let j0 = betas.iter().position(|&x| x == 0.0);
        let at = |i: Option<usize>| match (i, j0) {
            (Some(i), Some(j)) => json!(grid.cell(i, j)),
            _ => Value::Null,
        };
        fields_meta.insert(
            kind.to_string(),
            json!({
                "min": range.map(|r| r.0),
                "max": range.map(|r| r.1),
                "diverged_cells": grid.diverged.iter().filter(|&&d| d).count(),
                "at_a": at(ia),
                "at_b": at(ib),
            }),
        );
    }
    let meta = json!({
        "plane": plane.metadata(),
        "alpha": pc.alpha, "beta": pc.beta, "steps": pc.steps,
        "train_data": train_meta,
        "psp_data": psp.as_ref().map(|p| p.1.clone()),
        "psp_aggregation": run.cfg.psp.aggregation,
        "hessian_data": hess.as_ref().map(|h| h.1.clone()),
        "fields": fields_meta,
    });
    run.out.write_json("plane.json", &meta)?;
    finish(run, ctx, "plane", meta)
}

fn eigen_csv(pairs: &[EigenPair]) -> String {
    let mut s = String::from("rank,value,converged,iterations,residual\n");
    for (i, p) in pairs.iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{},{}", i + 1, p.value, p.converged, p.iterations, p.residual);
    }
    s
}

pub fn hessian(ctx: &Context, common: &Common, checkpoint: &Path) -> Result<()> {
    let mut run = start(common, &[])?;
    let (params, mask) = read_checkpoint(&mut run.out, &run.net, checkpoint)?;
    let (data, data_meta) = hessian_data(ctx, &run.cfg)?;
    let hc = run.cfg.hessian.clone();
    let restrict = if hc.restrict_to_mask {
        Some(mask.as_ref().context("hessian.restrict_to_mask needs a checkpoint with a mask")?)
    } else {
        None
    };
    let pairs = match hc.step {
        Some(h) => {
            let mut op = sparsescape::landscape::NetworkHessian::new(&run.net, params.values(), &data)?.with_step(h);
            if let Some(m) = restrict {
                op = op.restrict_to(m)?;
            }
            sparsescape::landscape::power_topk(|v| op.apply(v), op.dim(), &hc.eigen())?
        }
        None => top_k_eigenvalues(&run.net, params.values(), &data, &hc.eigen(), restrict)?,
    };
    run.out.write("eigenvalues.csv", eigen_csv(&pairs).as_bytes())?;
    let summary = json!({
        "eigenvalues": pairs,
        "data": data_meta,
        "restrict_to_mask": hc.restrict_to_mask,
        "step": hc.step,
        "checkpoint_values_sha256": values_digest(params.values()),
    });
    run.out.write_json("hessian.json", &summary)?;
    finish(run, ctx, "hessian", summary)
}

fn psp_metrics(run: &Run, params: &[f32], data: &LabeledDataset, orders: &[u8]) -> Result<(Value, Vec<(u8, String)>, String)> {
    let trace = capture_states(&run.net, params, data, orders.contains(&2))?;
    let l2 = psp_l2(&trace);
    let mut l2_csv = String::from("layer,neuron,mean_z2\n");
    let mut k = 0;
    for lg in trace.layers() {
        for u in 0..lg.units {
            let _ = writeln!(l2_csv, "{},{},{}", lg.layer, u, l2.per_neuron[k]);
            k += 1;
        }
    }
    let agg = run.cfg.psp.aggregation;
    let mut out = json!({ "psp_l2": { "network": l2.network, "per_layer": l2.per_layer } });
    let mut csvs = Vec::new();
    for &o in orders {
        let r = match o {
            1 => first_order_entropy(&trace)?,
            2 => second_order_entropy(&trace, &run.cfg.psp.selection())?,
            _ => bail!("entropy order must be 1 or 2"),
        };
        out[format!("entropy_{o}")] = serde_json::to_value(r.summary(agg))?;
        csvs.push((o, r.to_csv()));
    }
    Ok((out, csvs, l2_csv))
}

pub fn psp(ctx: &Context, common: &Common, checkpoint: &Path, order: Option<u8>) -> Result<()> {
    let mut run = start(common, &[])?;
    let orders: Vec<u8> = match order {
        None => vec![1, 2],
        Some(o @ (1 | 2)) => vec![o],
        Some(o) => bail!("--order must be 1 or 2, got {o}"),
    };
    let (params, _) = read_checkpoint(&mut run.out, &run.net, checkpoint)?;
    let (data, data_meta) = psp_data(ctx, &run.cfg)?;
    let (mut summary, csvs, l2_csv) = psp_metrics(&run, params.values(), &data, &orders)?;
    for (o, csv) in csvs {
        run.out.write(&format!("entropy_order{o}.csv"), csv.as_bytes())?;
    }
    run.out.write("psp_l2.csv", l2_csv.as_bytes())?;
    summary["data"] = data_meta;
    summary["aggregation"] = json!(run.cfg.psp.aggregation);
    summary["pairs"] = serde_json::to_value(run.cfg.psp.selection())?;
    run.out.write_json("psp.json", &summary)?;
    finish(run, ctx, "psp", summary)
}

pub fn analyze(ctx: &Context, common: &Common, gradual: &Path, oneshot: &Path) -> Result<()> {
    let mut run = start(common, &[])?;
    let (g, gm) = read_checkpoint(&mut run.out, &run.net, gradual)?;
    let (o, om) = read_checkpoint(&mut run.out, &run.net, oneshot)?;
    let train_ds = ctx.load(&run.cfg, Split::Train)?;
    let test_ds = ctx.load(&run.cfg, Split::Test)?;
    let (hdata, hmeta) = hessian_data(ctx, &run.cfg)?;
    let (pdata, pmeta) = psp_data(ctx, &run.cfg)?;
    let mut rows: Vec<(String, f64, f64)> = Vec::new();
    let mut per = Vec::new();
    for (p, m) in [(&g, &gm), (&o, &om)] {
        let test = run.net.evaluate(p.values(), &test_ds)?;
        let train = run.net.evaluate(p.values(), &train_ds)?;
        let eig = top_k_eigenvalues(&run.net, p.values(), &hdata, &run.cfg.hessian.eigen(), None)?;
        let (psp, _, _) = psp_metrics(&run, p.values(), &pdata, &[1, 2])?;
        let compression = m.as_ref().map(|m| m.weight_compression(run.net.layout()));
        per.push((test, train, eig, psp, compression));
    }
    let (gv, ov) = (&per[0], &per[1]);
    rows.push(("test_accuracy".into(), gv.0.accuracy, ov.0.accuracy));
    rows.push(("train_loss".into(), gv.1.loss, ov.1.loss));
    rows.push(("compression_weights".into(), gv.4.unwrap_or(f64::NAN), ov.4.unwrap_or(f64::NAN)));
    for k in 0..gv.2.len().min(ov.2.len()) {
        rows.push((format!("lambda_{}", k + 1), gv.2[k].value, ov.2[k].value));
    }
    let num = |v: &Value, path: &[&str]| path.iter().fold(v, |acc, k| &acc[*k]).as_f64().unwrap_or(f64::NAN);
    rows.push(("psp_l2".into(), num(&gv.3, &["psp_l2", "network"]), num(&ov.3, &["psp_l2", "network"])));
    rows.push(("entropy_1".into(), num(&gv.3, &["entropy_1", "network"]), num(&ov.3, &["entropy_1", "network"])));
    rows.push(("entropy_2".into(), num(&gv.3, &["entropy_2", "network"]), num(&ov.3, &["entropy_2", "network"])));
    let mut csv = String::from("metric,gradual,oneshot\n");
    let mut metrics = serde_json::Map::new();
    for (name, a, b) in &rows {
        let _ = writeln!(csv, "{name},{a},{b}");
        metrics.insert(name.clone(), json!({ "gradual": a, "oneshot": b }));
    }
    run.out.write("analysis.csv", csv.as_bytes())?;
    let summary = json!({
        "metrics": metrics,
        "eigen_converged": {
            "gradual": gv.2.iter().map(|p| p.converged).collect::<Vec<_>>(),
            "oneshot": ov.2.iter().map(|p| p.converged).collect::<Vec<_>>(),
        },
        "hessian_data": hmeta,
        "psp_data": pmeta,
    });
    run.out.write_json("analysis.json", &summary)?;
    finish(run, ctx, "analyze", summary)
}

pub fn report(out: &Path, runs: &[PathBuf]) -> Result<()> {
    let mut md = String::from("| run | command | key | value |\n|---|---|---|---|\n");
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["run", "command", "key", "value"])?;
    let mut output = RunOutput::new(out)?;
    for dir in runs {
        let path = dir.join("manifest.json");
        let bytes = output.input(&path)?;
        let m: Value = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
        let command = m["command"].as_str().unwrap_or("?").to_string();
        let mut flat = Vec::new();
        flatten_json("", &m["summary"], &mut flat);
        for (k, v) in flat {
            let _ = writeln!(md, "| {} | {command} | {k} | {v} |", dir.display());
            csv.write_record([dir.display().to_string(), command.clone(), k, v])?;
        }
    }
    output.write("report.md", md.as_bytes())?;
    output.write("report.csv", &csv.into_inner()?)?;
    output.finish("report", 1, None, &json!({ "runs": runs }), json!({ "runs": runs.len() }))
}

/// Scalar leaves of a JSON tree as dotted keys; arrays of objects are skipped.
fn flatten_json(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, x) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_json(&key, x, out);
            }
        }
        Value::Array(items) if items.iter().all(|x| !x.is_object() && !x.is_array()) => {
            let s: Vec<String> = items.iter().map(|x| x.to_string()).collect();
            out.push((prefix.to_string(), s.join(" ")));
        }
        Value::Array(_) => {}
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        x => out.push((prefix.to_string(), x.to_string())),
    }
}
