//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gsaflow_cli::{
    cmd_eval, cmd_gen_data, cmd_grad_check, cmd_train_stage1, cmd_train_stage2, load_checkpoint, split_dataset,
    renderer_for, EvalMode, EvalRow, Split,
};
use gsaflow_core::checkpoint::Checkpoint;
use gsaflow_core::config::RunConfig;
use gsaflow_core::data::{build_preference_pools, make_group_batches};
use gsaflow_core::dpo::{bind_policy, implicit_reward_accuracy, loss_dpo, sample_pair};
use gsaflow_core::flow::{euler_sample_from, sample_timestep, standard_normal, SamplerConfig, VelocityField};
use gsaflow_core::model::{gsa_attention, AdapterSet, Model};
use gsaflow_core::tensor::{Result as TResult, Tape, Tensor, Var};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ------------------------------------------------------------ attention

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data().chunks(t.cols()).map(|r| r.to_vec()).collect()
}

/// softmax(q·kᵀ/√d)·v per head, by explicit loops over the given key rows.
fn dense_attention(q: &[Vec<f64>], keys: &[Vec<f64>], values: &[Vec<f64>], heads: usize) -> Vec<Vec<f64>> {
    let width = q[0].len();
    let d = width / heads;
    let mut out = vec![vec![0.0; width]; q.len()];
    for (i, qi) in q.iter().enumerate() {
        for h in 0..heads {
            let cols = h * d..(h + 1) * d;
            let s: Vec<f64> = keys
                .iter()
                .map(|k| cols.clone().map(|c| qi[c] * k[c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let w: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for (wj, vj) in w.iter().zip(values) {
                for c in cols.clone() {
                    out[i][c] += wj / z * vj[c];
                }
            }
        }
    }
    out
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random attention case; returns (gsa output, dense oracle output).
fn attention_case(r: &mut ChaCha8Rng, nref: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let heads = r.random_range(1..5);
    let width = heads * r.random_range(1..9);
    let n = r.random_range(1..17);
    let [q, k, v] = [0, 1, 2].map(|_| Tensor::<f64>::randn([n, width], 1.0, r));
    let refs: Vec<(Tensor<f64>, Tensor<f64>)> = (0..nref)
        .map(|_| {
            let m = r.random_range(1..17);
            (Tensor::randn([m, width], 1.0, r), Tensor::randn([m, width], 1.0, r))
        })
        .collect();
    let mut tape = Tape::new();
    let [vq, vk, vv] = [&q, &k, &v].map(|t| tape.constant(t.clone()));
    let rv: Vec<(Var, Var)> = refs.iter().map(|(a, b)| (tape.constant(a.clone()), tape.constant(b.clone()))).collect();
    let out = gsa_attention(&mut tape, vq, vk, vv, &rv, heads).unwrap();
    let (mut keys, mut values) = (rows(&k), rows(&v));
    for (a, b) in &refs {
        keys.extend(rows(a));
        values.extend(rows(b));
    }
    (rows(tape.value(out)), dense_attention(&rows(&q), &keys, &values, heads))
}

fn c1_gsa_reduction() -> Outcome {
    let mut r = rng(1);
    let worst = (0..100).map(|_| attention_case(&mut r, 0)).map(|(a, b)| max_diff(&a, &b)).fold(0.0, f64::max);
    check(worst <= 1e-6, format!("max abs diff {worst:.2e} over 100 configs"))
}

fn c2_attention_oracle() -> Outcome {
    let mut r = rng(2);
    let worst = (0..100)
        .map(|i| attention_case(&mut r, 1 + i % 3))
        .map(|(a, b)| max_diff(&a, &b))
        .fold(0.0, f64::max);
    check(worst <= 1e-6, format!("max abs diff {worst:.2e} over 100 cases with 1-3 references"))
}

// ------------------------------------------------------------ gradients

fn c3_gradients() -> Outcome {
    let lines = cmd_grad_check(&RunConfig::default()).map_err(|e| e.to_string())?;
    let names: Vec<&str> = lines.iter().map(|l| l.name).collect();
    let all = ["loss_flow_matching", "loss_stage1", "loss_dpo"].iter().all(|n| names.contains(n));
    let detail = lines
        .iter()
        .map(|l| format!("{} {:.2e}", l.name, l.max_relative_error))
        .collect::<Vec<_>>()
        .join(", ");
    check(all && lines.iter().all(|l| l.passed()), detail)
}

// ------------------------------------------------------------ dpo init

fn c4_dpo_init() -> Outcome {
    let cfg = RunConfig::default();
    let renderer = renderer_for(&cfg.model).map_err(|e| e.to_string())?;
    let ds = split_dataset(&cfg, Split::Train).map_err(|e| e.to_string())?;
    let pools = build_preference_pools(&renderer, &ds, cfg.group_size, cfg.data.losers_per_mode, 4)
        .map_err(|e| e.to_string())?;
    let mut r = rng(4);
    let mut model = Model::<f32>::new(cfg.model.clone(), &mut r).map_err(|e| e.to_string())?;
    for t in model.adapters.set_mut(AdapterSet::Consistency).iter_mut() {
        *t = Tensor::randn(t.shape().to_vec(), 0.05, &mut r);
    }
    model.adapters.begin_preference_stage(&cfg.model, &mut r);
    let pairs: Vec<_> = (0..100)
        .map(|i| sample_pair(&pools[i % pools.len()], &mut r).unwrap())
        .collect();
    let mut worst = 0.0f64;
    for pair in &pairs {
        let mut tape = Tape::new();
        let theta = bind_policy(&model, &mut tape);
        let l = loss_dpo(&model, &mut tape, &theta, pair, cfg.dpo.beta).map_err(|e| e.to_string())?;
        worst = worst.max((tape.value(l).item() as f64 - std::f64::consts::LN_2).abs());
    }
    let acc = implicit_reward_accuracy(&model, &pairs).map_err(|e| e.to_string())?;
    check(worst <= 1e-6 && acc == 0.5, format!("max |loss - ln2| {worst:.2e}, accuracy {acc}"))
}

// ------------------------------------------------------------ timesteps

fn c6_timesteps() -> Outcome {
    let mut r = rng(6);
    let mut ts: Vec<f64> = (0..100_000).map(|_| sample_timestep(&mut r)).collect();
    let inside = ts.iter().filter(|&&t| t > 0.25 && t < 0.75).count() as f64 / ts.len() as f64;
    ts.sort_by(f64::total_cmp);
    let median = ts[ts.len() / 2];
    let cfg = RunConfig::default();
    let ds = split_dataset(&cfg, Split::Train).map_err(|e| e.to_string())?;
    let refs_clean = make_group_batches(&ds, cfg.group_size, rng(7))
        .map_err(|e| e.to_string())?
        .take(1000)
        .all(|b| b.reference_times().iter().all(|&t| t == 0.0));
    check(
        (0.49..=0.51).contains(&median) && (inside - 0.728).abs() <= 0.01 && refs_clean,
        format!("median {median:.4}, P(0.25<t<0.75) {inside:.4}, reference t = 0: {refs_clean}"),
    )
}

// ------------------------------------------------------------ sampler

struct Field<F: Fn(&Tensor<f64>, f64) -> Tensor<f64>> {
    shape: Vec<usize>,
    f: F,
}

impl<F: Fn(&Tensor<f64>, f64) -> Tensor<f64>> VelocityField<f64> for Field<F> {
    type Cache = ();

    fn latent_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }

    fn caption_len(&self) -> usize {
        8
    }

    fn prepare(&self, _: &[Tensor<f64>]) -> TResult<Option<()>> {
        Ok(None)
    }

    fn velocity(&self, z: &Tensor<f64>, t: f64, _: &[usize], _: Option<&()>) -> TResult<Tensor<f64>> {
        Ok((self.f)(z, t))
    }
}

fn c7_sampler() -> Outcome {
    let cfg = RunConfig::default();
    let shape = cfg.model.latent_shape().to_vec();
    let mut r = rng(8);
    let caption = vec![1, 4, 20, 36, 52, 2, 3, 3];
    let unit = SamplerConfig { cfg_scale: 1.0, ..cfg.sampler };

    // Constant field: z(0) = z(1) − k.
    let k = Tensor::<f64>::from_fn(shape.clone(), |i| (i % 7) as f64 * 0.25 - 0.75);
    let z1: Tensor<f64> = Tensor::from_fn(shape.clone(), |i| (i % 5) as f64 * 0.5);
    let field = Field { shape: shape.clone(), f: |_: &Tensor<f64>, _| k.clone() };
    let out = euler_sample_from(&field, z1.clone(), &caption, &[], &unit).map_err(|e| e.to_string())?;
    let constant_exact = out == z1.sub(&k).unwrap();

    // Straight path from eps to z0.
    let z0: Tensor<f64> = standard_normal(&shape, &mut r);
    let eps: Tensor<f64> = standard_normal(&shape, &mut r);
    let v = eps.sub(&z0).unwrap();
    let field = Field { shape: shape.clone(), f: |_: &Tensor<f64>, _| v.clone() };
    let straight = euler_sample_from(&field, eps, &caption, &[], &unit)
        .map_err(|e| e.to_string())?
        .max_abs_diff(&z0);

    // cfg_scale = 1 on the real model against a hand-rolled conditional Euler loop.
    let mut model = Model::<f32>::new(cfg.model.clone(), &mut r).map_err(|e| e.to_string())?;
    for t in model.adapters.set_mut(AdapterSet::Consistency).iter_mut() {
        *t = Tensor::randn(t.shape().to_vec(), 0.05, &mut r);
    }
    let refs: Vec<Tensor<f32>> = (0..2).map(|_| standard_normal(&shape, &mut r)).collect();
    let z: Tensor<f32> = standard_normal(&shape, &mut r);
    let got = euler_sample_from(&model, z.clone(), &caption, &refs, &unit).map_err(|e| e.to_string())?;
    let cache = model.reference_cache(&refs).map_err(|e| e.to_string())?;
    let n = unit.steps as f64;
    let start: Vec<f64> = z.data().iter().map(|&x| x as f64).collect();
    let mut sum = vec![0.0f64; start.len()];
    let mut cur = z;
    for i in 0..unit.steps {
        let t = 1.0 - i as f64 / n;
        let v = model.predict_velocity(&cur, t, &caption, Some(&cache)).map_err(|e| e.to_string())?;
        for (s, &vi) in sum.iter_mut().zip(v.data()) {
            *s += vi as f64;
        }
        let next = start.iter().zip(&sum).map(|(a, s)| (a - s / n) as f32).collect();
        cur = Tensor::new(shape.clone(), next).unwrap();
    }
    let bit_exact = got.data().iter().zip(cur.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    check(
        constant_exact && straight <= 1e-5 && bit_exact,
        format!("constant field exact: {constant_exact}, straight path err {straight:.2e}, cfg=1 bit-exact: {bit_exact}"),
    )
}

// ------------------------------------------------------------ hyperparameters

fn c11_defaults() -> Outcome {
    let c = RunConfig::default();
    let checks = [
        ("lora_rank 16", c.model.lora_rank == 16),
        ("lora_alpha 16", c.model.lora_alpha == 16.0),
        ("caption_dropout 0.1", c.caption_dropout == 0.1),
        ("adam beta1 0.9", c.adam.beta1 == 0.9),
        ("adam beta2 0.999", c.adam.beta2 == 0.999),
        ("adam eps 1e-8", c.adam.eps == 1e-8),
        ("weight_decay 1e-2", c.adam.weight_decay == 1e-2),
        ("stage1 lr 1e-4", c.adam.lr == 1e-4),
        ("dpo lr 5e-6", c.dpo.learning_rate == 5e-6),
        ("dpo beta 1800", c.dpo.beta == 1800.0),
        ("sampler steps 50", c.sampler.steps == 50),
        ("cfg 3.5", c.sampler.cfg_scale == 3.5),
    ];
    // The written form must parse back to the same defaults.
    let round_trip = RunConfig::parse(&c.to_text()).map(|p| p == c).unwrap_or(false);
    let bad: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    check(
        bad.is_empty() && round_trip,
        if bad.is_empty() {
            format!("{} constants match, text round trip: {round_trip}", checks.len())
        } else {
            format!("mismatched: {}", bad.join(", "))
        },
    )
}

// ------------------------------------------------------------ pipeline

/// Everything one full desk-scale run produces.
struct Run {
    dir: PathBuf,
    stage1_gsa: EvalRow,
    stage1_plain: EvalRow,
    stage2: EvalRow,
    base_hash: (String, String),
    phi_c_hash: (String, String),
}

const ARTIFACTS: [&str; 6] = [
    "stage1_gsa.ckpt",
    "stage1_gsa.csv",
    "stage1_plain.ckpt",
    "stage1_plain.csv",
    "stage2.ckpt",
    "stage2.csv",
];

fn pipeline(cfg: &RunConfig, dir: &Path) -> anyhow::Result<Run> {
    let p = |name: &str| dir.join(name);
    std::fs::create_dir_all(dir)?;
    cmd_gen_data(cfg, Split::Train, &p("train.ds"))?;
    cmd_gen_data(cfg, Split::Eval, &p("eval.ds"))?;
    let t = Instant::now();
    cmd_train_stage1(cfg, &p("train.ds"), &p("stage1_gsa.ckpt"), Some(&p("stage1_gsa.csv")), true)?;
    println!("    stage 1 with GSA: {:.0}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    cmd_train_stage1(cfg, &p("train.ds"), &p("stage1_plain.ckpt"), Some(&p("stage1_plain.csv")), false)?;
    println!("    stage 1 without GSA: {:.0}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let summary = cmd_train_stage2(cfg, &p("train.ds"), &p("stage1_gsa.ckpt"), &p("stage2.ckpt"), Some(&p("stage2.csv")))?;
    println!("    stage 2: {:.0}s, final loss {:.4}", t.elapsed().as_secs_f64(), summary.final_loss);
    let eval = |ckpt: &str, mode| cmd_eval(&p(ckpt), &p("eval.ds"), mode, cfg.seed, Some(&p("eval.csv")));
    Ok(Run {
        dir: dir.to_path_buf(),
        stage1_gsa: eval("stage1_gsa.ckpt", EvalMode::WithGsa)?,
        stage1_plain: eval("stage1_plain.ckpt", EvalMode::WithoutGsa)?,
        stage2: eval("stage2.ckpt", EvalMode::WithGsa)?,
        base_hash: summary.base_hash,
        phi_c_hash: summary.phi_c_hash,
    })
}

fn c5_freeze(run: &Run) -> Outcome {
    let same = run.base_hash.0 == run.base_hash.1 && run.phi_c_hash.0 == run.phi_c_hash.1;
    // The saved stage-2 checkpoint must also carry the stage-1 frozen sets.
    let s1 = load_checkpoint(&run.dir.join("stage1_gsa.ckpt")).map_err(|e| e.to_string())?;
    let s2 = load_checkpoint(&run.dir.join("stage2.ckpt")).map_err(|e| e.to_string())?;
    let (m1, m2) = (s1.into_model().unwrap(), s2.into_model().unwrap());
    let saved = [AdapterSet::Base, AdapterSet::Consistency]
        .iter()
        .all(|&s| m1.adapters.set(s) == m2.adapters.set(s));
    check(
        same && saved,
        format!("Φ {} -> {}, Φ^c {} -> {}", &run.base_hash.0[..12], &run.base_hash.1[..12], &run.phi_c_hash.0[..12], &run.phi_c_hash.1[..12]),
    )
}

fn c8_gsa_ablation(run: &Run) -> Outcome {
    let (g, n) = (run.stage1_gsa.report.cids_cross, run.stage1_plain.report.cids_cross);
    check(g - n >= 0.05, format!("CIDS-cross with GSA {g:.4}, without {n:.4}, gap {:.4} (need >= 0.05)", g - n))
}

fn c9_dpo_ablation(run: &Run) -> Outcome {
    let acc = run.stage2.reward_accuracy;
    let (before, after) = (run.stage1_gsa.report.cids_cross, run.stage2.report.cids_cross);
    check(
        acc >= 0.7 && after >= before - 0.01,
        format!("held-out accuracy {acc:.3} (need >= 0.7), CIDS-cross {before:.4} -> {after:.4}"),
    )
}

fn c10_determinism(a: &Run, b: &Run) -> Outcome {
    let mut differ = Vec::new();
    for name in ARTIFACTS.iter().chain(&["eval.csv", "train.ds", "eval.ds"]) {
        let x = std::fs::read(a.dir.join(name)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.dir.join(name)).map_err(|e| e.to_string())?;
        if x != y {
            differ.push(*name);
        }
    }
    // Load then save must reproduce the file byte for byte.
    let mut round_trip = true;
    for name in ["stage1_gsa.ckpt", "stage2.ckpt"] {
        let bytes = std::fs::read(a.dir.join(name)).map_err(|e| e.to_string())?;
        let ck = Checkpoint::load(&mut bytes.as_slice()).map_err(|e| e.to_string())?;
        let mut again = Vec::new();
        ck.save(&mut again).map_err(|e| e.to_string())?;
        let reloaded = Checkpoint::load(&mut again.as_slice()).map_err(|e| e.to_string())?;
        round_trip &= again == bytes && reloaded.into_model().unwrap().adapters == ck.into_model().unwrap().adapters;
    }
    check(
        differ.is_empty() && round_trip,
        if differ.is_empty() {
            format!("rerun byte-identical, checkpoint round trip bit-exact: {round_trip}")
        } else {
            format!("rerun differs in {}", differ.join(", "))
        },
    )
}

// ------------------------------------------------------------ driver

fn report(id: usize, name: &str, t: Instant, outcome: &Outcome) -> bool {
    let secs = t.elapsed().as_secs_f64();
    match outcome {
        Ok(d) => println!("criterion {id:>2} PASS  {name}: {d} ({secs:.1}s)"),
        Err(d) => println!("criterion {id:>2} FAIL  {name}: {d} ({secs:.1}s)"),
    }
    outcome.is_ok()
}

fn main() {
    let mut passed = Vec::new();
    let quick: [(usize, &str, fn() -> Outcome); 7] = [
        (1, "GSA reduction", c1_gsa_reduction),
        (2, "attention oracle", c2_attention_oracle),
        (3, "gradient suite", c3_gradients),
        (4, "DPO initialization identity", c4_dpo_init),
        (6, "timestep schedule", c6_timesteps),
        (7, "sampler exactness", c7_sampler),
        (11, "hyperparameter fidelity", c11_defaults),
    ];
    for (id, name, f) in quick {
        let t = Instant::now();
        let o = f();
        passed.push((id, report(id, name, t, &o)));
    }

    let cfg = RunConfig::default();
    let tmp = tempfile::tempdir().expect("temp dir");
    let t = Instant::now();
    println!("    full pipeline, run 1 ({} stage-1 steps, {} stage-2 steps)", cfg.stage1_steps, cfg.dpo.steps);
    let first = pipeline(&cfg, &tmp.path().join("a"));
    let pipeline_time = t;
    let t = Instant::now();
    println!("    full pipeline, run 2");
    let second = pipeline(&cfg, &tmp.path().join("b"));
    match (&first, &second) {
        (Ok(a), Ok(b)) => {
            println!("    {}", gsaflow_cli::EVAL_HEADER);
            for row in [&a.stage1_gsa, &a.stage1_plain, &a.stage2] {
                println!("    {}", row.csv());
            }
            passed.push((5, report(5, "freeze guarantee", pipeline_time, &c5_freeze(a))));
            passed.push((8, report(8, "GSA ablation direction", pipeline_time, &c8_gsa_ablation(a))));
            passed.push((9, report(9, "DPO ablation direction", pipeline_time, &c9_dpo_ablation(a))));
            passed.push((10, report(10, "determinism and persistence", t, &c10_determinism(a, b))));
        }
        _ => {
            let e = first.err().or(second.err()).map(|e| format!("{e:#}")).unwrap_or_default();
            for (id, name) in [(5, "freeze guarantee"), (8, "GSA ablation direction"), (9, "DPO ablation direction"), (10, "determinism and persistence")] {
                passed.push((id, report(id, name, t, &Err(format!("pipeline failed: {e}")))));
            }
        }
    }

    passed.sort();
    let failed: Vec<String> = passed.iter().filter(|(_, ok)| !ok).map(|(id, _)| id.to_string()).collect();
    println!("{} of {} criteria passed", passed.len() - failed.len(), passed.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
