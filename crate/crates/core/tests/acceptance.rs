//! Acceptance run: every criterion at its stated tolerance, one PASS/FAIL
//! line each. Criteria 1 to 9 gate the exit status; 10 to 12 are reported.
//!
//! The training criteria run the desk preset in `configs/desk.json`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unigrid_core::checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes};
use unigrid_core::codec::{caption_words, decode_g, encode_g, encode_u, words_to_ids, MASK};
use unigrid_core::data::World;
use unigrid_core::decoder::{generate, guided_logits, keep_counts, CfgMode, Condition, DecodeConfig};
use unigrid_core::evalbench::{
    gen_edit_suite, gen_t2i_suite, oracle_edit, oracle_t2i, run_edit_with, run_t2i_with, score_t2i,
};
use unigrid_core::grpo::compute_advantages;
use unigrid_core::model::{assemble_edit, assemble_t2i, EditConditions, Model, ModelConfig};
use unigrid_core::objectives::{apply_mask, mtp_loss, sample_mask, train_step, Example, MaskingConfig, Task};
use unigrid_core::pipeline::{evaluate_probes, probe_sets, run_ablate, run_align, run_pretrain, run_rl, run_sft, vqa_report, MetricsLog, RunConfig};
use unigrid_core::schedule::{lr_at, LrSchedule};
use unigrid_core::rewards::{reward_consistency_scene, reward_outcome_scene};
use unigrid_core::world::{
    apply_edit, describe, make_edit, sample_scene, synthesize_target_description, Scene, MAX_OBJECTS,
};
use unigrid_numerics::{grad_check, sample_coords, AdamHyper, AdamW};

const DESK: &str = include_str!("../../../configs/desk.json");

struct Outcome {
    hard_failures: Vec<String>,
}

impl Outcome {
    fn line(&mut self, id: usize, name: &str, hard: bool, pass: bool, detail: String) {
        let tag = if pass { "PASS" } else { "FAIL" };
        let kind = if hard { "hard" } else { "soft" };
        println!("[{tag}] criterion {id:>2} ({kind}) {name}: {detail}");
        if hard && !pass {
            self.hard_failures.push(format!("{id} {name}"));
        }
    }
}

fn desk() -> RunConfig {
    RunConfig::from_json(DESK).expect("desk preset parses")
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn c1_gradient(out: &mut Outcome) {
    let t = Instant::now();
    let cfg = ModelConfig { n_layers: 2, ..desk().model };
    let model = Model::<f64>::new(cfg.clone(), 11).expect("model");
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let scene = sample_scene(&mut r, 3, 6);
    let edit = make_edit(&mut r, &scene);
    let target = apply_edit(&scene, &edit).expect("edit applies");
    let x_u = encode_u::<f64>(&scene);
    let x_g = encode_g(&scene);
    let instruction = words_to_ids(&unigrid_core::codec::edit_words(&edit));
    let clean = encode_g(&target);
    let (mask, _) = sample_mask(&mut r, clean.len(), &MaskingConfig::default());
    let cond = EditConditions { x_u: Some(&x_u), instruction: Some(&instruction), x_g: Some(&x_g) };
    let layout = assemble_edit(&cond, &apply_mask(&clean, &mask), Some(&clean), Default::default(), cfg.max_seq_len)
        .expect("layout");
    let coords = sample_coords(&model.params, 50, &mut r);
    let worst = grad_check(&model.params, 1e-5, &coords, |tape, params| {
        let contract = |e: unigrid_core::Error| unigrid_numerics::NumericsError::Contract(e.to_string());
        let m = Model::from_params(cfg.clone(), params.clone()).map_err(contract)?;
        mtp_loss(&m, tape, &layout).map_err(contract)
    })
    .expect("gradient check runs");
    let el = secs(t.elapsed());
    out.line(
        1,
        "gradient fidelity",
        true,
        worst < 1e-4 && el < 120.0,
        format!("max relative error {worst:.2e} over 50 coordinates (< 1e-4), {el:.1} s (< 120 s)"),
    );
}

fn c2_advantages(out: &mut Outcome) {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_mean, mut worst_std, mut worst_affine) = (0.0f64, 0.0f64, 0.0f64);
    let mut ok = true;
    for _ in 0..1000 {
        let n = r.gen_range(2..=16);
        let mut rewards: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        rewards[0] = rewards[1] + 0.5; // never constant
        let (a, degenerate) = compute_advantages(&rewards, 1e-6).expect("advantages");
        ok &= !degenerate;
        let mean = a.iter().sum::<f64>() / n as f64;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        worst_mean = worst_mean.max(mean.abs());
        worst_std = worst_std.max((std - 1.0).abs());
        let (scale, shift) = (r.gen_range(0.1..10.0), r.gen_range(-5.0..5.0));
        let moved: Vec<f64> = rewards.iter().map(|x| scale * x + shift).collect();
        let (b, _) = compute_advantages(&moved, 1e-6).expect("advantages");
        worst_affine = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst_affine, f64::max);
    }
    let mut constant_ok = true;
    for _ in 0..1000 {
        let n = r.gen_range(2..=16);
        let v = r.gen_range(-3.0..3.0);
        let (a, degenerate) = compute_advantages(&vec![v; n], 1e-6).expect("advantages");
        constant_ok &= degenerate && a.iter().all(|&x| x == 0.0);
    }
    let pass = ok && constant_ok && worst_mean <= 1e-5 && worst_std <= 1e-5 && worst_affine <= 1e-6;
    out.line(
        2,
        "advantage law",
        true,
        pass,
        format!(
            "|mean| {worst_mean:.1e}, |std-1| {worst_std:.1e}, affine drift {worst_affine:.1e}, constant groups degenerate with A=0: {constant_ok}"
        ),
    );
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn c3_guidance(out: &mut Outcome) {
    let cfg = desk();
    let model = Model::<f64>::new(cfg.model.clone(), 3).expect("model");
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_t2i, mut worst_edit) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let scene = sample_scene(&mut r, 1, 6);
        let mut tokens = encode_g(&scene);
        let (mask, _) = sample_mask(&mut r, tokens.len(), &MaskingConfig::default());
        tokens = apply_mask(&tokens, &mask);
        let prompt = words_to_ids(&caption_words(&describe(&scene)));
        let t2i = Condition::T2i { prompt };
        let dc = DecodeConfig { cfg_mode: CfgMode::T2i, s: 1.0, ..DecodeConfig::default() };
        let (g, full) = guided_logits(&model, &tokens, &t2i, &dc).expect("logits");
        worst_t2i = worst_t2i.max(max_diff(&g, &full));
        let edit = make_edit(&mut r, &scene);
        let cond = Condition::Edit {
            x_u: encode_u(&scene),
            instruction: words_to_ids(&unigrid_core::codec::edit_words(&edit)),
            x_g: encode_g(&scene),
            order: cfg.order,
        };
        let dc = DecodeConfig { cfg_mode: CfgMode::Edit, s_i: 1.0, s_t: 1.0, ..DecodeConfig::default() };
        let (g, full) = guided_logits(&model, &tokens, &cond, &dc).expect("logits");
        worst_edit = worst_edit.max(max_diff(&g, &full));
    }
    out.line(
        3,
        "guidance identities",
        true,
        worst_t2i <= 1e-6 && worst_edit <= 1e-6,
        format!("s=1 t2i deviation {worst_t2i:.1e}, (s_I,s_T)=(1,1) edit deviation {worst_edit:.1e} (<= 1e-6)"),
    );
}

fn c4_round_trips(out: &mut Outcome) {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let codec_ok = (0..10_000).all(|_| {
        let s = sample_scene(&mut r, 0, MAX_OBJECTS);
        decode_g(&encode_g(&s)).map(|d| d == s).unwrap_or(false)
    });
    let cfg = desk();
    let ckpt = unigrid_core::checkpoint::Checkpoint {
        model: Model::new(cfg.model.clone(), 5).expect("model"),
        provenance: Vec::new(),
        rng_state: 9,
    };
    let bytes = to_bytes(&ckpt).expect("serialize");
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("c4.ug15");
    save_checkpoint(&path, &ckpt).expect("save");
    let ckpt_ok = to_bytes(&from_bytes(&bytes).expect("load")).expect("serialize") == bytes
        && to_bytes(&load_checkpoint(&path).expect("load")).expect("serialize") == bytes;
    let model = &ckpt.model;
    let mut no_mask = true;
    for i in 0..12u64 {
        let scene = sample_scene(&mut r, 1, 6);
        let edit = make_edit(&mut r, &scene);
        let t2i = Condition::T2i { prompt: words_to_ids(&caption_words(&describe(&scene))) };
        let ed = Condition::Edit {
            x_u: encode_u(&scene),
            instruction: words_to_ids(&unigrid_core::codec::edit_words(&edit)),
            x_g: encode_g(&scene),
            order: cfg.order,
        };
        let steps = [1, 7, 16, 64][i as usize % 4];
        for (cond, mode) in [(&t2i, CfgMode::T2i), (&t2i, CfgMode::None), (&ed, CfgMode::Edit), (&ed, CfgMode::None)] {
            let dc = DecodeConfig { steps, cfg_mode: mode, seed: i, ..DecodeConfig::default() };
            let (tokens, trace) = generate(model, cond, &dc).expect("generate");
            no_mask &= tokens.iter().all(|&t| t != MASK) && decode_g(&tokens).is_ok() && trace.len() == 64;
        }
    }
    let schedule_ok = (1..=64).all(|t| {
        let k = keep_counts(t, 64).expect("keep counts");
        k.len() == t && k.iter().sum::<usize>() == 64 && k.iter().all(|&c| c >= 1)
    });
    out.line(
        4,
        "codec and round trips",
        true,
        codec_ok && ckpt_ok && no_mask && schedule_ok,
        format!(
            "codec 10k: {codec_ok}, checkpoint bitwise: {ckpt_ok}, no MASK emitted: {no_mask}, keep_counts T=1..64: {schedule_ok}"
        ),
    );
}

fn c5_oracles(out: &mut Outcome) {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut outcome_ok = true;
    let mut holds = 0;
    for _ in 0..10_000 {
        let scene = sample_scene(&mut r, 0, MAX_OBJECTS);
        let source = if r.gen_bool(0.5) { scene.clone() } else { sample_scene(&mut r, 0, MAX_OBJECTS) };
        let caption = unigrid_core::data::sample_prompt(&mut r, &source);
        let a = reward_outcome_scene(&scene, &caption).expect("reward");
        let b = score_t2i(&scene, &caption).expect("score");
        outcome_ok &= a == b;
        holds += (a == 1.0) as usize;
    }
    let mut synth_ok = true;
    for _ in 0..10_000 {
        let scene = sample_scene(&mut r, 1, MAX_OBJECTS);
        let edit = make_edit(&mut r, &scene);
        let direct = describe(&apply_edit(&scene, &edit).expect("apply"));
        synth_ok &= synthesize_target_description(&scene, &edit).expect("synthesize") == direct;
    }
    let world = World::new(desk().data).expect("world");
    let t2i = gen_t2i_suite(&world, 1234, 20).expect("suite");
    let edit = gen_edit_suite(&world, 1234, 20).expect("suite");
    let ot = run_t2i_with(&t2i, 1234, |p, _| Ok(oracle_t2i(p))).expect("oracle t2i").overall;
    let oe = run_edit_with(&edit, 1234, |p, _| Ok(oracle_edit(p))).expect("oracle edit").overall;
    out.line(
        5,
        "oracle coherence",
        true,
        outcome_ok && synth_ok && ot == 1.0 && oe == 1.0,
        format!(
            "r_o == score_t2i on 10k ({holds} satisfied): {outcome_ok}, synthesized == describe(apply) on 10k: {synth_ok}, oracle t2i {ot:.3}, oracle edit {oe:.3}"
        ),
    );
}

fn c6_memorization(out: &mut Outcome) {
    let t = Instant::now();
    let cfg = desk();
    let world = World::new(cfg.data.clone()).expect("world");
    let corpus: Vec<Scene> = (0..32).map(|id| world.scene(id)).collect();
    let mut model = Model::<f32>::new(cfg.model.clone(), 6).expect("model");
    let (base_lr, warmup) = (2e-3, 100);
    let mut optim = AdamW::init(&model.params, AdamHyper { lr: base_lr, ..AdamHyper::default() }).expect("optimizer");
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let mut last = Vec::new();
    let steps = 2000;
    for step in 0..steps {
        let batch: Vec<Example> = (0..32)
            .map(|_| {
                let clean = encode_g(&corpus[r.gen_range(0..corpus.len())]);
                let (mask, _) = sample_mask(&mut r, clean.len(), &cfg.masking);
                let layout = assemble_t2i(&[], &apply_mask(&clean, &mask), Some(&clean), cfg.model.max_seq_len)
                    .expect("layout");
                Example { task: Task::T2i, layout }
            })
            .collect();
        let lr = lr_at(LrSchedule::Cosine, base_lr, step as u64, steps as u64, warmup);
        let m = train_step(&mut model, &mut optim, &batch, lr, 1.0).expect("train step");
        if step >= steps - 50 {
            last.push(m.loss_total);
        }
    }
    let final_loss = last.iter().sum::<f64>() / last.len() as f64;
    let descriptions: Vec<_> = corpus.iter().map(describe).collect();
    let (mut total, mut exact) = (0.0, 0);
    for seed in 0..100 {
        let dc = DecodeConfig { cfg_mode: CfgMode::None, seed, ..DecodeConfig::default() };
        let (tokens, _) = generate(&model, &Condition::T2i { prompt: Vec::new() }, &dc).expect("generate");
        let scene = decode_g(&tokens).expect("decodes");
        exact += corpus.contains(&scene) as usize;
        total += descriptions
            .iter()
            .map(|d| reward_consistency_scene(&scene, d).expect("reward"))
            .fold(0.0, f64::max);
    }
    let mean = total / 100.0;
    let el = secs(t.elapsed());
    out.line(
        6,
        "memorization",
        true,
        mean >= 0.95 && el < 600.0,
        format!(
            "r_u mean {mean:.3} over 100 seeds (>= 0.95), {exact}/100 exact corpus scenes, final MTP loss {final_loss:.4} after {steps} steps, {el:.0} s (< 600 s)"
        ),
    );
}

fn training_criteria(out: &mut Outcome) {
    let cfg = desk();
    let mut log = MetricsLog::in_memory();
    let t = Instant::now();
    let pre = run_pretrain(&cfg, &mut log).expect("pretrain");
    let t_pre = secs(t.elapsed());
    let sft = run_sft(&cfg, &pre, false, &mut log).expect("sft");
    let t_sft = secs(t.elapsed()) - t_pre;
    let vqa = vqa_report(&sft.model, &cfg).expect("vqa");
    let t0 = Instant::now();
    let (aligned, align_eval) = run_align(&cfg, &sft, false, &mut log).expect("align");
    let t_align = secs(t0.elapsed());
    let probes = probe_sets(&cfg, cfg.order).expect("probes");
    let sft_probe = evaluate_probes(&sft.model, &cfg, &probes).expect("probe");
    let t_rl0 = Instant::now();
    let (_, rl) = run_rl(&cfg, &aligned, false, &mut log).expect("rl");
    let t_rl = secs(t_rl0.elapsed());
    let total = secs(t.elapsed());
    let pass7 = vqa.overall >= 0.85 && align_eval.exact_match >= 0.90 && total < 3600.0;
    out.line(
        7,
        "supervised learnability",
        true,
        pass7,
        format!(
            "VQA exact-match {:.3} (>= 0.85) {:?}, align exact-match {:.3} (>= 0.90, clause accuracy {:.3}), pipeline {total:.0} s (< 3600 s; pretrain {t_pre:.0}, sft {t_sft:.0}, align {t_align:.0}, rl {t_rl:.0})",
            vqa.overall, vqa.per_category, align_eval.exact_match, align_eval.clause_accuracy
        ),
    );
    let dt = rl.probe_after.t2i.reward_mean - rl.probe_before.t2i.reward_mean;
    let de = rl.probe_after.edit.reward_mean - rl.probe_before.edit.reward_mean;
    out.line(
        8,
        "RL improves reward",
        true,
        dt >= 0.05 && de >= 0.05 && rl.kl_max < 1.0 && t_rl < 1800.0,
        format!(
            "t2i probe {:.3} -> {:.3} ({dt:+.3}), edit probe {:.3} -> {:.3} ({de:+.3}) (each >= +0.05), max token_kl {:.4} (< 1.0), {} steps in {t_rl:.0} s (< 1800 s)",
            rl.probe_before.t2i.reward_mean,
            rl.probe_after.t2i.reward_mean,
            rl.probe_before.edit.reward_mean,
            rl.probe_after.edit.reward_mean,
            rl.kl_max,
            rl.steps
        ),
    );
    out.line(
        9,
        "KL behavior",
        true,
        rl.kl_first == 0.0 && rl.kl_min >= 0.0,
        format!("token_kl at step 0 = {:e} (== 0), min over steps {:.2e} (>= 0)", rl.kl_first, rl.kl_min),
    );

    let t = Instant::now();
    let abl = run_ablate(&cfg, &aligned, &sft, Some(&pre), &mut log).expect("ablate");
    for row in &abl.rows {
        println!(
            "        ablation row: align={} {:?}: t2i {:.3}, edit {:.3}, edit degenerate fraction {:?}, final {}",
            row.alignment,
            row.alternation,
            row.t2i.overall,
            row.edit.overall,
            row.rl.edit_degenerate_fraction,
            &row.final_hash[..12]
        );
    }
    println!(
        "        edit baselines: with align {:.3}, without {:.3}; ablations took {:.0} s",
        abl.baseline_edit_with_align.overall,
        abl.baseline_edit_without_align.overall,
        secs(t.elapsed())
    );
    let soft = |name: &str| abl.soft.iter().find(|s| s.name == name);
    let pair = |a: &str, b: &str| match (soft(a), soft(b)) {
        (Some(x), Some(y)) => (x.pass && y.pass, format!("{}: {} [{}]; {}: {} [{}]", x.name, x.detail, ok(x.pass), y.name, y.detail, ok(y.pass))),
        _ => (false, "not measured".into()),
    };
    let (p, d) = pair("unified edit >= t2i_only edit", "unified t2i >= edit_only t2i");
    out.line(10, "unified vs single-task RL", false, p, d);
    let (p, mut d) = pair("edit RL gain with align >= without", "edit degenerate fraction lower with align");
    d.push_str(&format!(
        "; edit probe reward std post-sft {:.3}, post-align {:.3}",
        sft_probe.edit.reward_std, rl.probe_before.edit.reward_std
    ));
    out.line(11, "alignment ablation", false, p, d);
    let (p, d) = match soft("order UTG >= alternatives") {
        Some(s) => (s.pass, format!("{}; per order: {}", s.detail, abl.orders.iter().map(|o| format!("{:?} {:.3}", o.order, o.edit.overall)).collect::<Vec<_>>().join(", "))),
        None => (false, "not measured".into()),
    };
    out.line(12, "condition-order ablation", false, p, d);
}

fn ok(pass: bool) -> &'static str {
    if pass {
        "ok"
    } else {
        "not met"
    }
}

fn main() {
    // libtest-style filtering is not supported; `cargo test -- --list` should not run anything
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut out = Outcome { hard_failures: Vec::new() };
    c1_gradient(&mut out);
    c2_advantages(&mut out);
    c3_guidance(&mut out);
    c4_round_trips(&mut out);
    c5_oracles(&mut out);
    c6_memorization(&mut out);
    training_criteria(&mut out);
    if out.hard_failures.is_empty() {
        println!("acceptance: all hard criteria passed");
    } else {
        println!("acceptance: hard criteria failed: {}", out.hard_failures.join(", "));
        std::process::exit(1);
    }
}
