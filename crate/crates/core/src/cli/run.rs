use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde_json::json;

use super::args::*;
use super::CliError;
use crate::analytic::{
    check_family_membership, diagonal_wv, optimal_embedding, optimal_wv_l2, wv_constants, BoundsCase, Family,
};
use crate::checkpoint;
use crate::corpus::{
    enumerate_topic_subsets, generate, read_corpus, write_corpus, Layout, LengthPolicy, TopicModelConfig, TopicPolicy,
    DEFAULT_SUBSET_CAP,
};
use crate::landscape::{monte_carlo_loss, sweep, AttentionLevels, AxisSpec, LandscapeGrid, LandscapeSetting, McConfig};
use crate::loss::{LossConfig, LossKind};
use crate::masking::{mask_document, write_masked_corpus, MaskedDocument, MaskingConfig};
use crate::metrics::{attention_class_report, block_report, write_matrix_csv};
use crate::model::{AttentionMode, EmbeddingMode, ModelParams, ModelSpec, TensorId};
use crate::optim::{
    population_objective, train_with_hook, AdamHyper, FixedCorpus, Optimizer, Sampled, Schedule, StepLog, TrainConfig,
    TrainData,
};
use crate::oracle::NormalEquations;
use crate::rng::{self, Domain};

pub struct Outcome {
    pub artifacts: Vec<PathBuf>,
    /// `Some(false)` when a verification check failed.
    pub verified: Option<bool>,
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn masking_config(a: &MaskArgs) -> CliResult<MaskingConfig> {
    Ok(MaskingConfig::new(a.p_mask, a.p_keep, a.p_random)?)
}

fn corpus_config(a: &CorpusArgs, default_layout: Option<(usize, usize)>, seed: u64) -> CliResult<TopicModelConfig> {
    let (t, v) = match (a.num_topics, a.words_per_topic, default_layout) {
        (Some(t), Some(v), _) => (t, v),
        (t, v, Some((dt, dv))) => (t.unwrap_or(dt), v.unwrap_or(dv)),
        (None, _, None) => return Err(usage("--T is required")),
        (_, None, None) => return Err(usage("--v is required")),
    };
    let topics = match (a.fixed_tau, a.dirichlet) {
        (Some(tau), _) => TopicPolicy::FixedTau(tau),
        (None, alpha) => TopicPolicy::Dirichlet(alpha.unwrap_or(0.1)),
    };
    let length = match a.n {
        Some(n) => LengthPolicy::Fixed(n),
        None => LengthPolicy::UniformRange {
            min: a.n_min,
            max: a.n_max,
        },
    };
    Ok(TopicModelConfig::new(Layout::new(t, v)?, topics, length, seed)?)
}

fn create(path: &Path) -> CliResult<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<PathBuf> {
    let mut f = create(path)?;
    writeln!(f, "{}", serde_json::to_string_pretty(value)?)?;
    f.flush()?;
    Ok(path.to_path_buf())
}

fn write_matrix(path: &Path, m: &Array2<f64>) -> CliResult<PathBuf> {
    let mut f = create(path)?;
    write_matrix_csv(&mut f, m)?;
    f.flush()?;
    Ok(path.to_path_buf())
}

fn mask_all(docs: &[crate::corpus::Document], masking: &MaskingConfig, layout: Layout, seed: u64) -> Vec<MaskedDocument> {
    docs.iter()
        .enumerate()
        .map(|(i, d)| mask_document(d, masking, layout, &mut rng::stream(seed, Domain::Masking, i as u64)))
        .collect()
}

pub fn gen_data(a: &GenDataArgs, seed: u64) -> CliResult<Outcome> {
    let cfg = corpus_config(&a.corpus, None, seed)?;
    let docs = generate(&cfg, a.count);
    let mut artifacts = Vec::new();
    let path = a.out.join("corpus.txt");
    let mut f = create(&path)?;
    write_corpus(&mut f, &cfg, &docs)?;
    f.flush()?;
    artifacts.push(path);
    if a.masked {
        let masking = masking_config(&a.masking)?;
        let md = mask_all(&docs, &masking, cfg.layout, seed);
        let path = a.out.join("masked.txt");
        let mut f = create(&path)?;
        write_masked_corpus(&mut f, &md)?;
        f.flush()?;
        artifacts.push(path);
    }
    println!("wrote {} documents to {}", docs.len(), a.out.join("corpus.txt").display());
    Ok(Outcome {
        artifacts,
        verified: None,
    })
}

enum WvInit {
    Init,
    Identity,
    Block,
    Diagonal,
}

enum BpredInit {
    Init,
    Zero,
    Theorem,
}

#[derive(Default)]
struct Freeze {
    onehot: bool,
    /// Frozen trained embedding (at its initial value).
    emb: bool,
    uniform: bool,
    wv: Option<WvInit>,
    bv: bool,
    bpred: Option<BpredInit>,
    wk: bool,
    wq: bool,
}

fn parse_freeze(items: &[String]) -> CliResult<Freeze> {
    let mut f = Freeze::default();
    for raw in items.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        let (key, val) = match raw.split_once('=') {
            Some((k, v)) => (k, Some(v)),
            None => (raw, None),
        };
        match (key, val) {
            ("emb", Some("onehot")) => f.onehot = true,
            ("emb", None | Some("init")) => f.emb = true,
            ("attn", Some("uniform")) => f.uniform = true,
            ("wv", None | Some("init")) => f.wv = Some(WvInit::Init),
            ("wv", Some("identity")) => f.wv = Some(WvInit::Identity),
            ("wv", Some("block")) => f.wv = Some(WvInit::Block),
            ("wv", Some("diagonal")) => f.wv = Some(WvInit::Diagonal),
            ("bv", None) => f.bv = true,
            ("bpred", None | Some("init")) => f.bpred = Some(BpredInit::Init),
            ("bpred", Some("zero")) => f.bpred = Some(BpredInit::Zero),
            ("bpred", Some("theorem")) => f.bpred = Some(BpredInit::Theorem),
            ("wk", None) => f.wk = true,
            ("wq", None) => f.wq = true,
            _ => return Err(usage(format!("unknown freeze item {raw:?}"))),
        }
    }
    Ok(f)
}

fn build_model(a: &TrainArgs, layout: Layout, masking: &MaskingConfig, seed: u64) -> CliResult<ModelParams> {
    let fr = parse_freeze(&a.freeze)?;
    let mut spec = ModelSpec::new(layout);
    spec.embedding = if fr.onehot || a.embedding == EmbeddingArg::Onehot {
        EmbeddingMode::OneHotFrozen
    } else {
        EmbeddingMode::Trained
    };
    if fr.onehot && a.embedding == EmbeddingArg::Trained {
        return Err(usage("--freeze emb=onehot contradicts --embedding trained"));
    }
    spec.attention = if fr.uniform { AttentionMode::Uniform } else { AttentionMode::Learned };
    spec.d = a.d;
    spec.d_attn = a.d_attn;
    spec.biases = !a.no_biases;
    spec.sigma0 = a.sigma0;
    let mut p = ModelParams::init(&spec, seed)?;
    if fr.emb {
        p.set_frozen(TensorId::Embedding, true)?;
    }
    if let Some(init) = fr.wv {
        let w = match init {
            WvInit::Init => None,
            WvInit::Identity => Some(Array2::eye(p.d())),
            WvInit::Block => Some(optimal_wv_l2(masking, layout)?),
            WvInit::Diagonal => Some(diagonal_wv(masking, layout)?),
        };
        if let Some(w) = w {
            p.set(TensorId::Value, w)?;
        }
        p.set_frozen(TensorId::Value, true)?;
    }
    if fr.bv {
        p.set_frozen(TensorId::ValueBias, true)?;
    }
    if let Some(init) = fr.bpred {
        match init {
            BpredInit::Init => {}
            BpredInit::Zero => p.set(TensorId::PredBias, Array2::zeros((layout.vocab_size(), 1)))?,
            BpredInit::Theorem => {
                let b = optimal_embedding(masking, layout)?.b_pred;
                p.set(TensorId::PredBias, b.insert_axis(Axis(1)))?;
            }
        }
        p.set_frozen(TensorId::PredBias, true)?;
    }
    if fr.wk {
        p.set_frozen(TensorId::Key, true)?;
    }
    if fr.wq {
        p.set_frozen(TensorId::Query, true)?;
    }
    Ok(p)
}

fn steplog_line(l: &StepLog) -> String {
    let rot = l.wv_rotation.map(|r| r.to_string()).unwrap_or_default();
    format!("{},{},{},{},{},{}", l.step, l.loss, l.wk_norm, l.wq_norm, l.wv_norm, rot)
}

pub const STEPLOG_HEADER: &str = "step,loss,wk_norm,wq_norm,wv_norm,wv_rotation";

fn gram(p: &ModelParams) -> Array2<f64> {
    let we = p.get(TensorId::Embedding);
    we.t().dot(we)
}

pub fn train(a: &TrainArgs, seed: u64) -> CliResult<Outcome> {
    let masking = masking_config(&a.masking)?;
    let fixed = match &a.docs {
        Some(path) => {
            let (header, docs) = read_corpus(BufReader::new(fs::File::open(path)?), &path.display().to_string())?;
            if docs.is_empty() {
                return Err(usage(format!("{} holds no documents", path.display())));
            }
            Some((header.layout, docs))
        }
        None => None,
    };
    let corpus = corpus_config(&a.corpus, Some((10, 10)), seed)?;
    let layout = fixed.as_ref().map(|(l, _)| *l).unwrap_or(corpus.layout);
    let params = build_model(a, layout, &masking, seed)?;
    let loss = LossConfig::new(match a.loss {
        LossArg::Squared => LossKind::Squared,
        LossArg::Ce => LossKind::CrossEntropy,
    })
    .with_l2(a.l2);
    let optimizer = match a.opt {
        OptArg::Sgd => Optimizer::Sgd { lr: a.lr },
        OptArg::Adam => Optimizer::Adam(AdamHyper::new(a.lr)),
    };
    let mut cfg = TrainConfig::new(optimizer, a.steps, seed);
    cfg.batch_size = a.batch;
    cfg.log_every = a.log_every;
    cfg.remask_per_step = !a.fixed_masks;
    cfg.schedule = match a.schedule {
        ScheduleArg::Joint => Schedule::Joint,
        ScheduleArg::TwoStage => Schedule::TwoStage {
            stage1_steps: a.stage1,
            analytic_wv: a.analytic_wv,
        },
    };
    let ck_dir = a.out.join("checkpoint");
    let mut artifacts = Vec::new();
    if a.steps == 0 {
        loss.validate()?;
        artifacts.extend(checkpoint::save(&params, &ck_dir, Some(seed), Some(0))?);
        println!("wrote initial checkpoint to {}", ck_dir.display());
        return Ok(Outcome {
            artifacts,
            verified: None,
        });
    }
    cfg.validate()?;

    let sampled = Sampled(corpus);
    let fixed_source = fixed.map(|(_, docs)| FixedCorpus(docs));
    let data = match (&fixed_source, a.long_docs) {
        (Some(src), _) => TrainData::Documents(src),
        (None, Some(length)) => TrainData::LongDocuments { corpus, length },
        (None, None) => TrainData::Documents(&sampled),
    };

    let log_path = a.out.join("steplog.csv");
    let mut log = create(&log_path)?;
    writeln!(log, "{STEPLOG_HEADER}")?;
    artifacts.push(log_path);
    let mut hook = |l: &StepLog, _: &ModelParams| -> crate::Result<()> {
        writeln!(log, "{}", steplog_line(l))?;
        Ok(())
    };
    let result = train_with_hook(params, &data, &masking, &loss, &cfg, &mut hook);
    log.flush()?;
    let out = result?;

    artifacts.extend(checkpoint::save(&out.params, &ck_dir, Some(seed), Some(a.steps))?);
    if out.params.d() == layout.vocab_size() {
        artifacts.push(write_matrix(&a.out.join("wv.csv"), out.params.get(TensorId::Value))?);
    }
    artifacts.push(write_matrix(&a.out.join("gram.csv"), &gram(&out.params))?);
    let last = out.logs.last().expect("at least one log line");
    artifacts.push(write_json(
        &a.out.join("summary.json"),
        &json!({
            "final_step": last.step,
            "final_loss": last.loss,
            "final_l2_penalty": last.l2_penalty,
            "mask_retries": out.mask_retries,
        }),
    )?);
    println!("step {} loss {}", last.step, last.loss);
    Ok(Outcome {
        artifacts,
        verified: None,
    })
}

struct Check {
    name: String,
    pass: bool,
    detail: serde_json::Value,
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn small_setting(a: &VerifyArgs) -> CliResult<(Layout, usize)> {
    let layout = Layout::new(a.num_topics.unwrap_or(10), a.words_per_topic.unwrap_or(10))?;
    Ok((layout, a.tau.unwrap_or(2)))
}

fn verify_wv(a: &VerifyArgs, masking: &MaskingConfig) -> CliResult<Vec<Check>> {
    let (layout, tau) = small_setting(a)?;
    let subsets = enumerate_topic_subsets(layout.num_topics, tau, DEFAULT_SUBSET_CAP)?;
    let ne = NormalEquations::build(masking, layout, &subsets)?;
    let limit = ne.ridge_limit(1e-12);
    let closed = optimal_wv_l2(masking, layout)?;
    let dev = max_abs_diff(&closed, &limit);
    let loss_gap = ne.loss(&closed) - ne.loss(&limit);
    let k = wv_constants(masking, layout)?;
    let fam = check_family_membership(&closed, masking, layout, Family::Value, 1e-9)?;
    Ok(vec![
        Check {
            name: "wv-l2/oracle".into(),
            pass: dev < 1e-9,
            detail: json!({"max_abs_diff": dev, "loss_gap": loss_gap, "tolerance": 1e-9, "k1": k.k1, "k2": k.k2, "k3": k.k3}),
        },
        Check {
            name: "wv-l2/family".into(),
            pass: fam.member,
            detail: json!({"max_residual": fam.max_residual, "tolerance": 1e-9}),
        },
    ])
}

fn verify_embedding(a: &VerifyArgs, masking: &MaskingConfig) -> CliResult<Vec<Check>> {
    let (layout, tau) = small_setting(a)?;
    let opt = optimal_embedding(masking, layout)?;
    let mut spec = ModelSpec::new(layout);
    spec.embedding = EmbeddingMode::Trained;
    spec.attention = AttentionMode::Uniform;
    spec.biases = false;
    let mut p = ModelParams::init(&spec, 0)?;
    p.set(TensorId::Embedding, opt.embedding.clone())?;
    p.set(TensorId::Value, Array2::eye(layout.vocab_size()))?;
    p.set(TensorId::PredBias, opt.b_pred.clone().insert_axis(Axis(1)))?;
    let subsets = enumerate_topic_subsets(layout.num_topics, tau, DEFAULT_SUBSET_CAP)?;
    let (loss, g) = population_objective(&p, &subsets, masking, LossKind::Squared)?;
    let norm = [TensorId::Embedding, TensorId::PredBias]
        .iter()
        .filter_map(|&id| g.get(id))
        .flat_map(|m| m.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    // row 0 is absorbed by the mask entry of the prediction bias
    let fam = check_family_membership(&opt.gram, masking, layout, Family::Embedding, 1e-9)?;
    let word_residual = fam.row_residual[1..].iter().fold(0.0f64, |m, r| m.max(*r));
    Ok(vec![
        Check {
            name: "embedding/gradient".into(),
            pass: norm < 1e-8,
            detail: json!({"gradient_norm": norm, "population_loss": loss, "tolerance": 1e-8}),
        },
        Check {
            name: "embedding/family".into(),
            pass: word_residual <= 1e-9,
            detail: json!({"max_word_row_residual": word_residual, "tolerance": 1e-9}),
        },
    ])
}

fn landscape_setting(case: BoundsCase, masking: &MaskingConfig, t: usize, v: usize, tau: usize) -> CliResult<LandscapeSetting> {
    Ok(LandscapeSetting {
        case,
        masking: *masking,
        layout: Layout::new(t, v)?,
        tau,
    })
}

fn write_grid(path: &Path, grid: &LandscapeGrid) -> CliResult<PathBuf> {
    let mut f = create(path)?;
    grid.write_csv(&mut f)?;
    f.flush()?;
    Ok(path.to_path_buf())
}

fn verify_attention(a: &VerifyArgs, masking: &MaskingConfig, case: BoundsCase, artifacts: &mut Vec<PathBuf>) -> CliResult<Vec<Check>> {
    let s = landscape_setting(
        case,
        masking,
        a.num_topics.unwrap_or(100),
        a.words_per_topic.unwrap_or(300),
        a.tau.unwrap_or(20),
    )?;
    let axis = AxisSpec::new(1e-4, 1e7, a.grid)?;
    let grid = sweep(&s, axis, axis, None)?;
    let name = match case {
        BoundsCase::Block => "attention-block",
        BoundsCase::Diagonal => "attention-diagonal",
    };
    artifacts.push(write_grid(&a.out.join(format!("{name}.csv")), &grid)?);
    Ok(vec![Check {
        name: format!("{name}/containment"),
        pass: grid.bounds_check(),
        detail: grid.summary_json(),
    }])
}

pub fn verify(a: &VerifyArgs) -> CliResult<Outcome> {
    let masking = masking_config(&a.masking)?;
    let mut artifacts = Vec::new();
    let mut checks = Vec::new();
    let all = a.theorem == TheoremArg::All;
    if all || a.theorem == TheoremArg::WvL2 {
        checks.extend(verify_wv(a, &masking)?);
    }
    if all || a.theorem == TheoremArg::Embedding {
        checks.extend(verify_embedding(a, &masking)?);
    }
    if all || a.theorem == TheoremArg::AttentionBlock {
        checks.extend(verify_attention(a, &masking, BoundsCase::Block, &mut artifacts)?);
    }
    if all || a.theorem == TheoremArg::AttentionDiagonal {
        checks.extend(verify_attention(a, &masking, BoundsCase::Diagonal, &mut artifacts)?);
    }
    let ok = checks.iter().all(|c| c.pass);
    for c in &checks {
        println!("{} {}", if c.pass { "PASS" } else { "FAIL" }, c.name);
    }
    let report: Vec<serde_json::Value> = checks
        .iter()
        .map(|c| json!({"check": c.name, "pass": c.pass, "detail": c.detail}))
        .collect();
    artifacts.push(write_json(&a.out.join("verify.json"), &json!({"pass": ok, "checks": report}))?);
    Ok(Outcome {
        artifacts,
        verified: Some(ok),
    })
}

fn parse_cell(s: &str) -> CliResult<(usize, usize)> {
    let bad = || usage(format!("bad grid cell {s:?}, expected alpha_index:beta_index"));
    let (i, j) = s.split_once(':').ok_or_else(bad)?;
    Ok((i.trim().parse().map_err(|_| bad())?, j.trim().parse().map_err(|_| bad())?))
}

pub fn landscape(a: &LandscapeArgs, seed: u64) -> CliResult<Outcome> {
    let masking = masking_config(&a.masking)?;
    let case = match a.case {
        CaseArg::Block => BoundsCase::Block,
        CaseArg::Diagonal => BoundsCase::Diagonal,
    };
    let s = landscape_setting(case, &masking, a.num_topics, a.words_per_topic, a.tau)?;
    let axis = AxisSpec::new(a.min, a.max, a.grid)?;
    let mut grid = sweep(&s, axis, axis, None)?;
    let mut cells = a.mc_cells.iter().map(|c| parse_cell(c)).collect::<CliResult<Vec<_>>>()?;
    if a.mc_argmin {
        cells.push((grid.argmin / a.grid, grid.argmin % a.grid));
    }
    let mut checks = Vec::new();
    for (n, &(ai, bi)) in cells.iter().enumerate() {
        if ai >= a.grid || bi >= a.grid {
            return Err(usage(format!("grid cell {ai}:{bi} outside a {0}x{0} grid", a.grid)));
        }
        let idx = ai * a.grid + bi;
        let mc = McConfig {
            doc_len: a.mc_doc_len,
            positions: a.mc_positions,
            seed: seed.wrapping_add(n as u64),
        };
        let p = &mut grid.points[idx];
        let est = monte_carlo_loss(AttentionLevels::new(p.alpha, p.beta)?, &s, &mc)?;
        p.mc = Some(est);
        checks.push(json!({
            "cell": [ai, bi],
            "alpha": p.alpha,
            "beta": p.beta,
            "exact_loss": p.exact_loss,
            "mc_loss": est.loss,
            "mc_se": est.se,
            "relative_error": (est.loss - p.exact_loss) / p.exact_loss,
        }));
    }
    let mut artifacts = vec![write_grid(&a.out.join("landscape.csv"), &grid)?];
    let mut summary = grid.summary_json();
    summary["monte_carlo"] = json!(checks);
    artifacts.push(write_json(&a.out.join("summary.json"), &summary)?);
    let p = grid.argmin_point();
    println!(
        "argmin alpha {} beta {} gamma {} loss {} bounds {}",
        p.alpha,
        p.beta,
        p.gamma,
        p.exact_loss,
        if grid.bounds_check() { "pass" } else { "fail" }
    );
    Ok(Outcome {
        artifacts,
        verified: None,
    })
}

pub fn analyze(a: &AnalyzeArgs, seed: u64) -> CliResult<Outcome> {
    if !a.attention_classes && !a.blocks {
        return Err(usage("analyze needs --attention-classes and/or --blocks"));
    }
    let (params, _) = checkpoint::load(&a.checkpoint)?;
    let layout = params.layout;
    let mut artifacts = Vec::new();
    if a.attention_classes {
        let path = a.docs.as_ref().ok_or_else(|| usage("--attention-classes needs --docs"))?;
        let (header, docs) = read_corpus(BufReader::new(fs::File::open(path)?), &path.display().to_string())?;
        if header.layout != layout {
            return Err(usage("corpus and checkpoint layouts differ"));
        }
        let masking = masking_config(&a.masking)?;
        let md = mask_all(&docs, &masking, layout, seed);
        let report = attention_class_report(&params, &md, !a.no_debias)?;
        artifacts.push(write_json(&a.out.join("attention_classes.json"), &serde_json::to_value(&report)?)?);
        let show = |c: &crate::metrics::ClassAverage| c.mean.map(|m| m.to_string()).unwrap_or_else(|| "-".into());
        println!(
            "same-word {} same-topic-diff-word {} diff-topic {}",
            show(&report.avg_same_word),
            show(&report.avg_same_topic_diff_word),
            show(&report.avg_diff_topic)
        );
    }
    if a.blocks {
        let e = gram(&params);
        let mut reports = serde_json::Map::new();
        reports.insert("gram".into(), serde_json::to_value(block_report(&e, layout)?)?);
        artifacts.push(write_matrix(&a.out.join("gram.csv"), &e)?);
        if params.d() == layout.vocab_size() {
            let wv = params.get(TensorId::Value);
            reports.insert("wv".into(), serde_json::to_value(block_report(wv, layout)?)?);
            artifacts.push(write_matrix(&a.out.join("wv.csv"), wv)?);
        }
        artifacts.push(write_json(&a.out.join("blocks.json"), &serde_json::Value::Object(reports))?);
    }
    Ok(Outcome {
        artifacts,
        verified: None,
    })
}
