// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pipeline stages. Each reads artifacts of earlier stages from the run
//! directory and registers what it writes in the manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::{Mechanism, ModelSource, RunConfig};
use super::eval::{
    bench_overhead, build_eval_set, evaluate_setting, transfer_eval, vector_plan, EvalReport,
    EvalSet, ReportProvenance, Shot,
};
use super::manifest::ArtifactManifest;
use crate::corpus::{
    generate_corpus, make_shuffled, render_prompt, sample_exemplars, DatasetSplits, PromptInstance,
    PromptTemplate, SampleStrategy, Setting, NL,
};
use crate::detect::{detect_language, detect_repetition};
use crate::edit::{plan_neuron_edit, plan_random_heads, EditPlan, NeuronEditMode, Strategy};
use crate::error::{Error, Result};
use crate::locate::{
    causal_aie, extract_function_vector, intersect_components, locate_mt_neurons,
    locate_repetition_neurons, mean_head_outputs, repetition_case, select_top_heads,
    FunctionVector, LocatedComponents, MeanHeadOutputs,
};
use crate::model::{generate, io, InterventionSpec, Weights};
use crate::testbed::{
    plant_language_model, plant_repetition_model, planted_config, train_toy_model_logged,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenCorpus,
    Train,
    Plant,
    LocateHeads,
    LocateNeurons,
    LocateRpn,
    Intersect,
    ExtractFv,
    EditEval,
    TransferEval,
    Audit,
    Bench,
    Report,
}

const MODEL: &str = "model";

impl Stage {
    pub const ALL: [Stage; 13] = [
        Stage::GenCorpus,
        Stage::Train,
        Stage::Plant,
        Stage::LocateHeads,
        Stage::LocateNeurons,
        Stage::LocateRpn,
        Stage::Intersect,
        Stage::ExtractFv,
        Stage::EditEval,
        Stage::TransferEval,
        Stage::Audit,
        Stage::Bench,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenCorpus => "gen-corpus",
            Stage::Train => "train",
            Stage::Plant => "plant",
            Stage::LocateHeads => "locate-heads",
            Stage::LocateNeurons => "locate-neurons",
            Stage::LocateRpn => "locate-rpn",
            Stage::Intersect => "intersect",
            Stage::ExtractFv => "extract-fv",
            Stage::EditEval => "edit-eval",
            Stage::TransferEval => "transfer-eval",
            Stage::Audit => "audit",
            Stage::Bench => "bench",
            Stage::Report => "report",
        }
    }

    /// Stages whose artifacts this one always reads. `model` stands for
    /// whichever of `train` and `plant` ran last.
    fn requires(self, cfg: &RunConfig) -> Vec<&'static str> {
        match self {
            Stage::GenCorpus => vec![],
            Stage::Train | Stage::Plant => vec!["gen-corpus"],
            Stage::LocateHeads | Stage::LocateNeurons | Stage::LocateRpn | Stage::Audit => {
                vec!["gen-corpus", MODEL]
            }
            Stage::Intersect => vec!["locate-heads"],
            Stage::ExtractFv => vec!["locate-heads"],
            Stage::EditEval => {
                let mut v = vec!["gen-corpus", MODEL];
                match cfg.edit.strategy {
                    Strategy::Mtv => v.push("extract-fv"),
                    Strategy::MtvI | Strategy::MtvID => v.extend(["intersect", "extract-fv"]),
                    Strategy::RandomHeads => v.push("locate-heads"),
                    Strategy::MtNeurons => v.push("locate-neurons"),
                    Strategy::RpNeurons => v.push("locate-rpn"),
                    Strategy::Empty => {}
                }
                v
            }
            Stage::TransferEval => vec!["gen-corpus", MODEL, "locate-heads"],
            Stage::Bench => vec![MODEL, "edit-eval"],
            Stage::Report => vec!["edit-eval"],
        }
    }

    /// The stage sequence of a full run for `cfg`.
    pub fn default_sequence(cfg: &RunConfig) -> Vec<Stage> {
        let model = match cfg.model_source {
            ModelSource::Planted => Stage::Plant,
            ModelSource::Trained => Stage::Train,
        };
        let mut v = vec![Stage::GenCorpus, model];
        match cfg.edit.strategy {
            Strategy::MtNeurons => v.push(Stage::LocateNeurons),
            Strategy::RpNeurons => v.push(Stage::LocateRpn),
            Strategy::Empty => {}
            _ => v.extend([Stage::LocateHeads, Stage::Intersect, Stage::ExtractFv]),
        }
        v.push(Stage::EditEval);
        if matches!(
            cfg.edit.strategy,
            Strategy::Mtv | Strategy::MtvI | Strategy::MtvID
        ) {
            v.push(Stage::TransferEval);
        }
        v.extend([Stage::Audit, Stage::Bench, Stage::Report]);
        v
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage `{s}`")))
    }
}

fn satisfied(m: &ArtifactManifest, dep: &str) -> bool {
    if dep == MODEL {
        m.has("train") || m.has("plant")
    } else {
        m.has(dep)
    }
}

/// Stages that read `stage`'s outputs, directly or not.
fn dependents(stage: Stage, cfg: &RunConfig) -> Vec<Stage> {
    let key = match stage {
        Stage::Train | Stage::Plant => MODEL,
        s => s.name(),
    };
    let mut out: Vec<Stage> = Vec::new();
    let mut frontier = vec![key.to_string()];
    while let Some(k) = frontier.pop() {
        for s in Stage::ALL {
            let reads = s.requires(cfg).contains(&k.as_str())
                || (k == "intersect"
                    && matches!(s, Stage::ExtractFv | Stage::EditEval | Stage::TransferEval))
                || (k == "locate-neurons" && s == Stage::Intersect);
            if reads && !out.contains(&s) && s != stage {
                out.push(s);
                frontier.push(s.name().to_string());
            }
        }
    }
    out
}

/// What the repetition locator found, or that it found nothing to work on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpnArtifact {
    /// `located` or `no-repetition`.
    pub status: String,
    pub n_cases: usize,
    pub scanned: usize,
    pub selected: Option<LocatedComponents>,
    pub n_repe: Option<LocatedComponents>,
    pub n_compare: Option<LocatedComponents>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub setting: Setting,
    pub strategy: Strategy,
    pub shot: Shot,
    pub lmr_base: f64,
    pub lmr_edit: f64,
    pub rr_base: f64,
    pub rr_edit: f64,
    pub bleu_base: f64,
    pub bleu_edit: f64,
    pub lmr_rel: Option<f64>,
    pub rr_rel: Option<f64>,
    pub bleu_rel: Option<f64>,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
    hash: String,
    written: Vec<PathBuf>,
}

impl Ctx<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, v: &T) -> Result<()> {
        let s = serde_json::to_string_pretty(v)?;
        self.write_text(rel, &s)
    }

    fn write_text(&mut self, rel: &str, s: &str) -> Result<()> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&p, s).map_err(|e| Error::io(&p, e))?;
        self.written.push(p);
        Ok(())
    }

    fn read_json<T: DeserializeOwned>(&self, rel: &str) -> Result<T> {
        let p = self.path(rel);
        let s = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&s)?)
    }

    fn corpus(&self) -> Result<DatasetSplits> {
        DatasetSplits::load(&self.path("corpus"))
    }

    fn model(&self) -> Result<Weights> {
        io::load(&self.path("model/model.json"))
    }

    fn settings(&self, data: &DatasetSplits) -> Vec<Setting> {
        data.settings.keys().copied().collect()
    }

    fn eval_sets(&self, data: &DatasetSplits, n: usize) -> Result<Vec<EvalSet>> {
        let shot = self.cfg.eval_shot();
        self.settings(data)
            .into_iter()
            .map(|s| build_eval_set(data, s, shot, n, self.cfg.seed))
            .collect()
    }

    fn provenance(&self, artifacts: &[&str]) -> ReportProvenance {
        ReportProvenance {
            config_hash: Some(self.hash.clone()),
            seed: Some(self.cfg.seed),
            artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Queries from the train split, each with `k` exemplars.
fn train_prompts(
    data: &DatasetSplits,
    setting: Setting,
    k: usize,
    n: usize,
    seed: u64,
    label: &str,
) -> Result<Vec<PromptInstance>> {
    let s = data.splits(setting)?;
    let mut rng = crate::rng::named(seed, &format!("{label}/{setting}"));
    let template = PromptTemplate::default();
    s.train[..n.min(s.train.len())]
        .iter()
        .map(|q| {
            let ex = sample_exemplars(
                &s.exps,
                k.min(s.exps.len()),
                SampleStrategy::Uniform,
                &mut rng,
            )?;
            render_prompt(&template, &ex, q, ex.len())
        })
        .collect()
}

fn gen_corpus(cx: &mut Ctx) -> Result<()> {
    let data = generate_corpus(&cx.cfg.corpus_config())?;
    let dir = cx.path("corpus");
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    data.save(&dir)?;
    cx.written.push(dir.join("layout.json"));
    for s in data.settings.keys() {
        for name in ["exps", "train", "test"] {
            cx.written
                .push(dir.join(s.to_string()).join(format!("{name}.jsonl")));
        }
    }
    Ok(())
}

fn save_model(cx: &mut Ctx, w: &Weights) -> Result<()> {
    let p = cx.path("model/model.json");
    fs::create_dir_all(p.parent().unwrap()).map_err(|e| Error::io(&p, e))?;
    io::save(w, &p)?;
    cx.written.push(io::blob_path(&p));
    cx.written.push(p);
    Ok(())
}

fn train(cx: &mut Ctx) -> Result<()> {
    let data = cx.corpus()?;
    let (w, losses) = train_toy_model_logged(&cx.cfg.model, &data, &cx.cfg.train_config())?;
    save_model(cx, &w)?;
    cx.write_json("model/train_log.json", &losses)
}

fn plant(cx: &mut Ctx) -> Result<()> {
    let data = cx.corpus()?;
    let config = planted_config(&data.layout);
    let (w, truth) = match cx.cfg.mechanism {
        Mechanism::LanguageHead => plant_language_model(&config, &data.layout, cx.cfg.seed)?,
        Mechanism::RepetitionNeuron => plant_repetition_model(&config, &data.layout, cx.cfg.seed)?,
    };
    save_model(cx, &w)?;
    cx.write_json("model/truth.json", &truth)
}

fn locate_heads(cx: &mut Ctx) -> Result<()> {
    let (data, w) = (cx.corpus()?, cx.model()?);
    let hc = cx.cfg.heads.clone();
    let pre_top = hc.pre_top.min(w.config.n_total_heads());
    for setting in cx.settings(&data) {
        let prompts = train_prompts(
            &data,
            setting,
            hc.k_shot,
            hc.n_prompts,
            cx.cfg.seed,
            "head-prompts",
        )?;
        let pool = &data.splits(setting)?.exps;
        let shuffled = prompts
            .iter()
            .enumerate()
            .map(|(i, p)| make_shuffled(p, pool, cx.cfg.seed.wrapping_add(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let means = mean_head_outputs(&w, &prompts)?;
        let aie = causal_aie(&w, &prompts, &shuffled, &means, hc.mode, true)?;
        let mut top = select_top_heads(&aie, pre_top)?;
        top.provenance.settings = vec![setting];
        let base = format!("heads/{setting}");
        cx.write_json(&format!("{base}/aie.json"), &aie)?;
        cx.write_text(&format!("{base}/aie.csv"), &aie.to_csv())?;
        cx.write_json(&format!("{base}/means.json"), &means)?;
        cx.write_json(&format!("{base}/top.json"), &top)?;
    }
    Ok(())
}

/// Cases the model handles without error at `shot`.
fn clean_cases(
    w: &Weights,
    data: &DatasetSplits,
    prompts: Vec<PromptInstance>,
) -> Result<Vec<PromptInstance>> {
    let none = InterventionSpec::none();
    let mut keep = Vec::new();
    for p in prompts {
        let budget = (2 * p.query.tgt.len() + 4).min(w.config.max_seq_len - p.rendered.len());
        let g = generate(w, &p.rendered, budget.max(1), &none, NL)?;
        let lang_ok = detect_language(&g.tokens, &data.layout).detected == Some(p.setting.tgt);
        if lang_ok && !detect_repetition(&g.tokens, g.hit_max).flagged {
            keep.push(p);
        }
    }
    Ok(keep)
}

fn locate_neurons(cx: &mut Ctx) -> Result<()> {
    let (data, w) = (cx.corpus()?, cx.model()?);
    let nc = cx.cfg.neurons.clone();
    let pre_top = nc.pre_top.min(w.config.n_total_neurons());
    for setting in cx.settings(&data) {
        let candidates = train_prompts(
            &data,
            setting,
            nc.shot.k(),
            4 * nc.n_cases,
            cx.cfg.seed,
            "neuron-prompts",
        )?;
        let mut cases = clean_cases(&w, &data, candidates)?;
        if cases.is_empty() {
            return Err(Error::Empty("error-free attribution cases"));
        }
        cases.truncate(nc.n_cases);
        let (scores, mut top) =
            locate_mt_neurons(&w, &cases, nc.n_cases, pre_top, cx.cfg.seed, nc.steps)?;
        top.provenance.settings = vec![setting];
        cx.write_json(&format!("neurons/{setting}/scores.json"), &scores)?;
        cx.write_json(&format!("neurons/{setting}/top.json"), &top)?;
    }
    Ok(())
}

fn locate_rpn(cx: &mut Ctx) -> Result<()> {
    let (data, w) = (cx.corpus()?, cx.model()?);
    let nc = cx.cfg.neurons.clone();
    let none = InterventionSpec::none();
    let mut cases = Vec::new();
    let mut scanned = 0;
    let per_setting = (4 * nc.rp_cases).max(8);
    'outer: for setting in cx.settings(&data) {
        for p in train_prompts(&data, setting, 1, per_setting, cx.cfg.seed, "rpn-prompts")? {
            scanned += 1;
            let room = w.config.max_seq_len.saturating_sub(p.rendered.len());
            if room == 0 {
                continue;
            }
            let g = generate(&w, &p.rendered, nc.rp_max_new_tokens.min(room), &none, NL)?;
            let v = detect_repetition(&g.tokens, g.hit_max);
            if v.flagged {
                cases.push(repetition_case(&p.rendered, &v)?);
                if cases.len() == nc.rp_cases {
                    break 'outer;
                }
            }
        }
    }
    let art = match locate_repetition_neurons(&w, &cases, nc.rp_pool, nc.rp_top, nc.steps) {
        Ok(r) => RpnArtifact {
            status: "located".into(),
            n_cases: cases.len(),
            scanned,
            selected: Some(r.selected),
            n_repe: Some(r.n_repe),
            n_compare: Some(r.n_compare),
        },
        Err(Error::NoRepetitionCases) => RpnArtifact {
            status: "no-repetition".into(),
            n_cases: 0,
            scanned,
            selected: None,
            n_repe: None,
            n_compare: None,
        },
        Err(e) => return Err(e),
    };
    cx.write_json("rpn/located.json", &art)
}

fn per_setting<T: DeserializeOwned>(
    cx: &Ctx,
    data_settings: &[Setting],
    pattern: &str,
) -> Result<BTreeMap<Setting, T>> {
    data_settings
        .iter()
        .map(|s| Ok((*s, cx.read_json(&pattern.replace("{}", &s.to_string()))?)))
        .collect()
}

fn corpus_settings(cx: &Ctx) -> Result<Vec<Setting>> {
    let layout_dir = cx.path("corpus");
    Ok(Setting::ALL
        .into_iter()
        .filter(|s| layout_dir.join(s.to_string()).is_dir())
        .collect())
}

fn intersect(cx: &mut Ctx, m: &ArtifactManifest) -> Result<()> {
    let settings = corpus_settings(cx)?;
    let hc = cx.cfg.heads.clone();
    let heads: BTreeMap<Setting, LocatedComponents> =
        per_setting(cx, &settings, "heads/{}/top.json")?;
    let pre = heads
        .values()
        .map(|l| l.len())
        .min()
        .unwrap_or(0)
        .min(hc.pre_top);
    let hi = intersect_components(&heads, pre, hc.final_top.min(pre))?;
    cx.write_json("intersect/heads.json", &hi)?;
    if m.has("locate-neurons") {
        let nc = cx.cfg.neurons.clone();
        let neurons: BTreeMap<Setting, LocatedComponents> =
            per_setting(cx, &settings, "neurons/{}/top.json")?;
        let pre = neurons
            .values()
            .map(|l| l.len())
            .min()
            .unwrap_or(0)
            .min(nc.pre_top);
        let ni = intersect_components(&neurons, pre, nc.final_top.min(pre))?;
        cx.write_json("intersect/neurons.json", &ni)?;
    }
    Ok(())
}

fn extract_fv(cx: &mut Ctx, m: &ArtifactManifest) -> Result<()> {
    let settings = corpus_settings(cx)?;
    let final_top = cx.cfg.heads.final_top;
    let inter: Option<LocatedComponents> = if m.has("intersect") {
        Some(cx.read_json("intersect/heads.json")?)
    } else {
        None
    };
    for s in settings {
        let means: MeanHeadOutputs = cx.read_json(&format!("heads/{s}/means.json"))?;
        let top: LocatedComponents = cx.read_json(&format!("heads/{s}/top.json"))?;
        let fv = extract_function_vector(&means, &top.truncated(final_top), s)?;
        cx.write_json(&format!("fv/{s}.json"), &fv)?;
        if let Some(h) = &inter {
            if !h.is_empty() {
                let fv = extract_function_vector(&means, h, s)?;
                cx.write_json(&format!("fv/{s}.intersected.json"), &fv)?;
            }
        }
    }
    Ok(())
}

/// The plan `cfg.edit.strategy` compiles to for `setting`.
fn plan_for(cx: &Ctx, w: &Weights, setting: Setting) -> Result<EditPlan> {
    let cfg = cx.cfg;
    let layer = cfg.edit.layer;
    match cfg.edit.strategy {
        Strategy::Empty => Ok(EditPlan::empty()),
        Strategy::Mtv | Strategy::MtvI | Strategy::MtvID => {
            let (fv_path, heads): (String, LocatedComponents) = if cfg.edit.strategy
                == Strategy::Mtv
            {
                let top: LocatedComponents = cx.read_json(&format!("heads/{setting}/top.json"))?;
                (
                    format!("fv/{setting}.json"),
                    top.truncated(cfg.heads.final_top),
                )
            } else {
                (
                    format!("fv/{setting}.intersected.json"),
                    cx.read_json("intersect/heads.json")?,
                )
            };
            if !cx.path(&fv_path).exists() {
                return Err(Error::MissingDependency {
                    stage: "extract-fv".into(),
                });
            }
            let fv: FunctionVector = cx.read_json(&fv_path)?;
            match cfg.edit.strategy {
                Strategy::MtvID => {
                    crate::edit::plan_mtv_i_d(&fv, &heads, &w.config, Strategy::MtvID)
                }
                s => crate::edit::plan_mtv(
                    &fv,
                    layer.unwrap_or_else(|| crate::edit::default_mtv_layer(w.config.n_layers)),
                    &w.config,
                    s,
                ),
            }
        }
        Strategy::RandomHeads => {
            let means: MeanHeadOutputs = cx.read_json(&format!("heads/{setting}/means.json"))?;
            let top: LocatedComponents = cx.read_json(&format!("heads/{setting}/top.json"))?;
            let located = top.truncated(cfg.heads.final_top);
            let random = plan_random_heads(located.len(), cfg.seed, &w.config, &located.items)?;
            vector_plan(w, Strategy::RandomHeads, &random, &means, setting, layer)
        }
        Strategy::MtNeurons => {
            let p = cx.path("intersect/neurons.json");
            let neurons: LocatedComponents = if p.exists() {
                cx.read_json("intersect/neurons.json")?
            } else {
                let top: LocatedComponents =
                    cx.read_json(&format!("neurons/{setting}/top.json"))?;
                top.truncated(cfg.neurons.final_top)
            };
            plan_neuron_edit(
                &neurons,
                cfg.edit.neuron_mode,
                &w.config,
                Strategy::MtNeurons,
            )
        }
        Strategy::RpNeurons => {
            let art: RpnArtifact = cx.read_json("rpn/located.json")?;
            let sel = art.selected.ok_or(Error::NoRepetitionCases)?;
            plan_neuron_edit(&sel, NeuronEditMode::Erase, &w.config, Strategy::RpNeurons)
        }
    }
}

fn edit_eval(cx: &mut Ctx) -> Result<()> {
    let (data, w) = (cx.corpus()?, cx.model()?);
    let sets = cx.eval_sets(&data, cx.cfg.eval.n_cases)?;
    let mut plans = BTreeMap::new();
    let mut evals = Vec::new();
    for set in &sets {
        let plan = plan_for(cx, &w, set.setting)?;
        evals.push(evaluate_setting(
            &w,
            &data,
            &plan,
            set,
            cx.cfg.eval.max_new_tokens,
        )?);
        plans.insert(set.setting, plan);
    }
    let first = plans
        .values()
        .next()
        .ok_or(Error::Empty("evaluation sets"))?;
    let report = EvalReport {
        strategy: cx.cfg.edit.strategy,
        components: first.components.clone(),
        settings: evals,
        provenance: cx.provenance(&["corpus", "model/model.json", "eval/plans.json"]),
    };
    cx.write_json("eval/plans.json", &plans)?;
    cx.write_json("eval/report.json", &report)
}

fn transfer(cx: &mut Ctx, m: &ArtifactManifest) -> Result<()> {
    let (data, w) = (cx.corpus()?, cx.model()?);
    let settings = cx.settings(&data);
    let source = cx.cfg.eval.transfer_source;
    let means: BTreeMap<Setting, MeanHeadOutputs> =
        per_setting(cx, &settings, "heads/{}/means.json")?;
    let heads: LocatedComponents =
        if m.has("intersect") && matches!(cx.cfg.edit.strategy, Strategy::MtvI | Strategy::MtvID) {
            cx.read_json("intersect/heads.json")?
        } else {
            let top: LocatedComponents = cx.read_json(&format!("heads/{source}/top.json"))?;
            top.truncated(cx.cfg.heads.final_top)
        };
    let mut sets = cx.eval_sets(&data, cx.cfg.eval.n_cases)?;
    // zero-shot is where language mismatch shows
    if cx.cfg.eval.shot.is_none() {
        sets = settings
            .iter()
            .map(|s| build_eval_set(&data, *s, Shot::Zero, cx.cfg.eval.n_cases, cx.cfg.seed))
            .collect::<Result<_>>()?;
    }
    let strategy = match cx.cfg.edit.strategy {
        s @ (Strategy::Mtv | Strategy::MtvI | Strategy::MtvID) => s,
        _ => Strategy::Mtv,
    };
    let report = transfer_eval(
        &w,
        &data,
        source,
        &heads,
        &means,
        &sets,
        strategy,
        cx.cfg.edit.layer,
        cx.cfg.seed,
        cx.cfg.eval.max_new_tokens,
    )?;
    cx.write_json("transfer/report.json", &report)
}

fn audit(cx: &mut Ctx) -> Result<()> {
    let (data, w) = (cx.corpus()?, cx.model()?);
    let sets = cx.eval_sets(&data, cx.cfg.eval.n_cases)?;
    let plan = EditPlan::empty();
    let settings = sets
        .iter()
        .map(|s| evaluate_setting(&w, &data, &plan, s, cx.cfg.eval.max_new_tokens))
        .collect::<Result<_>>()?;
    let report = EvalReport {
        strategy: Strategy::Empty,
        components: Vec::new(),
        settings,
        provenance: cx.provenance(&["corpus", "model/model.json"]),
    };
    cx.write_json("audit/report.json", &report)
}

fn bench(cx: &mut Ctx) -> Result<()> {
    let (data, w) = (cx.corpus()?, cx.model()?);
    let plans: BTreeMap<Setting, EditPlan> = cx.read_json("eval/plans.json")?;
    let ec = cx.cfg.eval.clone();
    let mut reports = BTreeMap::new();
    for (setting, plan) in &plans {
        let set = build_eval_set(
            &data,
            *setting,
            cx.cfg.eval_shot(),
            ec.bench_cases,
            cx.cfg.seed,
        )?;
        let prompts: Vec<_> = set.prompts.iter().map(|p| p.rendered.clone()).collect();
        reports.insert(
            *setting,
            bench_overhead(
                &w,
                plan,
                &prompts,
                ec.bench_max_new_tokens,
                ec.bench_repeats,
            )?,
        );
    }
    // wall-clock numbers are machine-specific, so the file is not byte-reproducible
    cx.write_json("bench/report.json", &reports)
}

fn rows(experiment: &str, r: &EvalReport) -> Vec<SummaryRow> {
    r.settings
        .iter()
        .map(|s| SummaryRow {
            experiment: experiment.into(),
            setting: s.setting,
            strategy: r.strategy,
            shot: s.shot,
            lmr_base: s.baseline.lmr,
            lmr_edit: s.edited.lmr,
            rr_base: s.baseline.rr,
            rr_edit: s.edited.rr,
            bleu_base: s.baseline.bleu,
            bleu_edit: s.edited.bleu,
            lmr_rel: s.relative.lmr,
            rr_rel: s.relative.rr,
            bleu_rel: s.relative.bleu,
        })
        .collect()
}

fn report(cx: &mut Ctx, m: &ArtifactManifest) -> Result<()> {
    let eval: EvalReport = cx.read_json("eval/report.json")?;
    let mut all = rows("edit-eval", &eval);
    if m.has("transfer-eval") {
        let t: super::eval::TransferReport = cx.read_json("transfer/report.json")?;
        for p in &t.pairs {
            for (name, arm) in [
                ("transfer-located", &p.located),
                ("transfer-random", &p.random),
            ] {
                let r = EvalReport {
                    strategy: if name == "transfer-random" {
                        Strategy::RandomHeads
                    } else {
                        t.strategy
                    },
                    components: Vec::new(),
                    settings: vec![arm.clone()],
                    provenance: ReportProvenance::default(),
                };
                all.extend(rows(name, &r));
            }
        }
    }
    let mut csv = String::from("experiment,setting,strategy,shot,lmr_base,lmr_edit,lmr_rel,rr_base,rr_edit,rr_rel,bleu_base,bleu_edit,bleu_rel\n");
    let opt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_default();
    for r in &all {
        csv.push_str(&format!(
            "{},{},{},{:?},{:.4},{:.4},{},{:.4},{:.4},{},{:.4},{:.4},{}\n",
            r.experiment,
            r.setting,
            r.strategy,
            r.shot,
            r.lmr_base,
            r.lmr_edit,
            opt(r.lmr_rel),
            r.rr_base,
            r.rr_edit,
            opt(r.rr_rel),
            r.bleu_base,
            r.bleu_edit,
            opt(r.bleu_rel)
        ));
    }
    cx.write_json("report/summary.json", &all)?;
    cx.write_text("report/summary.csv", &csv)
}

fn run_stage(stage: Stage, cx: &mut Ctx, m: &ArtifactManifest) -> Result<()> {
    match stage {
        Stage::GenCorpus => gen_corpus(cx),
        Stage::Train => train(cx),
        Stage::Plant => plant(cx),
        Stage::LocateHeads => locate_heads(cx),
        Stage::LocateNeurons => locate_neurons(cx),
        Stage::LocateRpn => locate_rpn(cx),
        Stage::Intersect => intersect(cx, m),
        Stage::ExtractFv => extract_fv(cx, m),
        Stage::EditEval => edit_eval(cx),
        Stage::TransferEval => transfer(cx, m),
        Stage::Audit => audit(cx),
        Stage::Bench => bench(cx),
        Stage::Report => report(cx, m),
    }
}

/// Runs `stages` in order inside `dir`.
///
/// A stage already recorded under the same config hash is skipped unless
/// `force` is set. An existing run directory made with a different config
/// is an error unless `force` is set, in which case its records are dropped.
pub fn run_pipeline(
    cfg: &RunConfig,
    stages: &[Stage],
    dir: &Path,
    force: bool,
) -> Result<ArtifactManifest> {
    cfg.validate()?;
    let hash = cfg.hash();
    let mpath = ArtifactManifest::path(dir);
    let mut manifest = if mpath.exists() {
        let s = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut m: ArtifactManifest = serde_json::from_str(&s)?;
        if m.config_hash != hash {
            if !force {
                return Err(Error::ConfigHashMismatch {
                    path: mpath,
                    expected: hash,
                    found: m.config_hash,
                });
            }
            ArtifactManifest::new(hash.clone())
        } else {
            m.drop_incomplete(dir);
            m.verify(dir)?;
            m
        }
    } else {
        ArtifactManifest::new(hash.clone())
    };
    for &stage in stages {
        if manifest.has(stage.name()) && !force {
            continue;
        }
        for dep in stage.requires(cfg) {
            if !satisfied(&manifest, dep) {
                return Err(Error::MissingDependency {
                    stage: dep.to_string(),
                });
            }
        }
        let mut cx = Ctx {
            cfg,
            dir,
            hash: hash.clone(),
            written: Vec::new(),
        };
        run_stage(stage, &mut cx, &manifest)?;
        // downstream records no longer describe these inputs
        for d in dependents(stage, cfg) {
            manifest.stages.remove(d.name());
        }
        if matches!(stage, Stage::Train | Stage::Plant) {
            manifest.stages.remove(if stage == Stage::Train {
                "plant"
            } else {
                "train"
            });
        }
        manifest.record(dir, stage.name(), &cx.written)?;
        manifest.save(dir)?;
    }
    Ok(manifest)
}
