//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::cell::OnceCell;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use octctx::analysis::{chamfer, collect_features, d1_psnr, interclass_stats};
use octctx::codec::{decode_symbols, encode_symbols, ideal_bits, FreqTable, FREQ_TOTAL};
use octctx::geometry::{quantize, synth, QuantizedPointCloud, SynthKind};
use octctx::model::{
    loss_ce, loss_mse, occupancy_bits, param_group, train, BranchVector8, Distribution255,
    LossRecord, Model, ModelConfig, Objective, ParamGroup, Schedule, SequenceRunner, Stage,
    Variant, CLASSES,
};
use octctx::nn::gradient_check;
use octctx::octree::{build, NodeSequence};
use octctx::pipeline::{decode, decode_bytes, encode};
use octctx::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn lossless() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cases = 0;
    let mut failures = 0;
    for s in 0..100u64 {
        let kind = SynthKind::ALL[s as usize % 5];
        let n = rng.gen_range(1..=5000);
        let depth = rng.gen_range(1..=6u8);
        let pc = synth(kind, n, 1000 + s)?;
        let want = quantize(&pc, depth)?;
        for v in [Variant::Base, Variant::Er, Variant::Em, Variant::Emr] {
            let model = Model::new(ModelConfig {
                seed: s,
                ..ModelConfig::toy().with_variant(v)
            })?;
            let (bs, _) = encode(&pc, depth, depth, &model)?;
            let got = decode_bytes(&bs.to_bytes(), &model)?;
            cases += 1;
            if got != want {
                failures += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures == 0 && elapsed < Duration::from_secs(600),
        format!(
            "{cases} round trips, {failures} mismatches, {:.1} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn random_table(rng: &mut ChaCha8Rng) -> FreqTable {
    let sharp = rng.gen_range(0.0..12.0);
    let raw: Vec<f64> = (0..CLASSES)
        .map(|_| rng.gen_range(0.0f64..1.0).powf(sharp))
        .collect();
    let sum: f64 = raw.iter().sum();
    let budget = FREQ_TOTAL as f64 - CLASSES as f64;
    let freq = raw.iter().map(|r| 1 + (r / sum * budget) as u32).collect();
    FreqTable::from_freqs(freq).unwrap()
}

fn sample(rng: &mut ChaCha8Rng, t: &FreqTable) -> u8 {
    let v = rng.gen_range(0..t.total());
    (1..=255u8)
        .find(|&c| t.cum()[c as usize - 1] + t.freq(c) > v)
        .unwrap()
}

fn coder_optimality() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = f64::NEG_INFINITY;
    let mut ok = true;
    for _ in 0..50 {
        let len = rng.gen_range(1000..4000);
        let pool: Vec<FreqTable> = (0..16).map(|_| random_table(&mut rng)).collect();
        let tables: Vec<FreqTable> = (0..len)
            .map(|_| pool[rng.gen_range(0..pool.len())].clone())
            .collect();
        let symbols: Vec<u8> = tables.iter().map(|t| sample(&mut rng, t)).collect();
        let payload = encode_symbols(&symbols, &tables)?;
        let ideal = ideal_bits(&symbols, &tables);
        let real = 8.0 * payload.len() as f64;
        worst = worst.max(real - (1.01 * ideal + 64.0));
        ok &= real <= 1.01 * ideal + 64.0;
        ok &= decode_symbols(&payload, &tables)? == symbols;
    }
    outcome(ok, format!("worst margin {worst:.1} bits (must be <= 0)"))
}

fn uniform_codelength() -> Result<Outcome> {
    let model = Model::new(ModelConfig {
        zero_init_output: true,
        ..ModelConfig::desk()
    })?;
    let pc = synth(SynthKind::Plane, 20000, 3)?;
    let (_, report) = encode(&pc, 8, 8, &model)?;
    let per_node = report.payload_bits as f64 / report.node_count as f64;
    let target = 255f64.log2();
    outcome(
        (per_node - target).abs() <= 0.01,
        format!(
            "{per_node:.4} bits/node over {} nodes, target {target:.4}",
            report.node_count
        ),
    )
}

fn gradients() -> Result<Outcome> {
    let cfg = ModelConfig {
        seed: 4,
        ..ModelConfig::toy().with_variant(Variant::Emr)
    };
    let model = Model::new(cfg.clone())?;
    let seq = build(&quantize(&synth(SynthKind::GaussianClusters, 300, 4)?, 5)?);
    let range = 6..22;
    let eval = model.batch_gradients(&seq, range.clone(), Objective::Both)?;
    let report = gradient_check(
        &model.params,
        &eval.grads,
        1e-4,
        1e-6,
        |_| true,
        |p| {
            let m = Model {
                config: cfg.clone(),
                params: p.clone(),
            };
            let e = m.batch_gradients(&seq, range.clone(), Objective::Both)?;
            Ok(e.ce + e.mse)
        },
    )?;
    outcome(
        report.max_rel_err < 1e-4,
        format!(
            "{} entries, max relative error {:.2e} at {:?}",
            report.checked, report.max_rel_err, report.worst
        ),
    )
}

fn group_equal(a: &Model, b: &Model, keep: impl Fn(ParamGroup) -> bool) -> bool {
    a.params
        .iter()
        .filter(|(n, _)| keep(param_group(n)))
        .all(|(n, t)| b.params.get(n) == Some(t))
}

fn two_stage() -> Result<Outcome> {
    let corpus = vec![build(&quantize(&synth(SynthKind::Sphere, 2000, 5)?, 6)?)];
    let init = Model::new(ModelConfig::desk().with_variant(Variant::Emr))?;
    let sched = |b, m| Schedule {
        branch_epochs: b,
        main_epochs: m,
        ..Schedule::default()
    };
    let after1 = train(init.clone(), &corpus, &sched(1, 0))?.model;
    let after2 = train(init.clone(), &corpus, &sched(1, 1))?.model;
    let branch_moved = !group_equal(&init, &after1, |g| g == ParamGroup::Branch);
    let stage1 = group_equal(&init, &after1, |g| g != ParamGroup::Branch);
    let stage2 = group_equal(&after1, &after2, |g| g == ParamGroup::Branch);
    let rest_moved = !group_equal(&after1, &after2, |g| g != ParamGroup::Branch);
    outcome(
        stage1 && stage2 && branch_moved && rest_moved,
        format!(
            "stage 1 main/trunk frozen {stage1}, stage 2 branch frozen {stage2}, trained groups moved {}",
            branch_moved && rest_moved
        ),
    )
}

fn learning_effect() -> Result<Outcome> {
    let start = Instant::now();
    let corpus: Vec<NodeSequence> = (0..2)
        .map(|s| {
            Ok(build(&quantize(
                &synth(SynthKind::Plane, 20000, 60 + s)?,
                8,
            )?))
        })
        .collect::<Result<_>>()?;
    let model = Model::new(ModelConfig::desk().with_variant(Variant::Emr))?;
    let trained = train(model, &corpus, &Schedule::default())?.model;
    let uniform = Model::new(ModelConfig {
        zero_init_output: true,
        ..ModelConfig::desk()
    })?;
    let test = synth(SynthKind::Plane, 20000, 69)?;
    let (bs, rt) = encode(&test, 8, 8, &trained)?;
    let (_, ru) = encode(&test, 8, 8, &uniform)?;
    let lossless = decode(&bs, &trained)? == quantize(&test, 8)?;
    let elapsed = start.elapsed();
    outcome(
        lossless && rt.bpip <= 0.8 * ru.bpip && elapsed < Duration::from_secs(900),
        format!(
            "trained {:.4} vs uniform {:.4} bpip (ratio {:.3}), {:.0} s",
            rt.bpip,
            ru.bpip,
            rt.bpip / ru.bpip,
            elapsed.as_secs_f64()
        ),
    )
}

fn branch_convergence() -> Result<Outcome> {
    let full: Vec<[u32; 3]> = (0..16u32)
        .flat_map(|x| (0..16u32).flat_map(move |y| (0..16u32).map(move |z| [x, y, z])))
        .collect();
    let seq = build(&QuantizedPointCloud::new(4, full, [0.0; 3], 1.0)?);
    let cfg = ModelConfig::toy().with_variant(Variant::Emr);
    let sched = Schedule {
        branch_epochs: 120,
        main_epochs: 0,
        lr: 1e-2,
        lr_decay: 1.0,
        batch_size: 16,
        ..Schedule::default()
    };
    let model = train(Model::new(cfg)?, std::slice::from_ref(&seq), &sched)?.model;
    let mut runner = SequenceRunner::new(&model);
    let (mut min_out, mut worst_mse) = (f64::INFINITY, 0.0f64);
    for i in 0..seq.len() {
        let p = runner.predict(&seq, i)?;
        min_out = p.branch.0.iter().copied().fold(min_out, f64::min);
        worst_mse = worst_mse.max(loss_mse(&p.branch, occupancy_bits(255)));
        runner.commit(&seq, i)?;
    }
    outcome(
        min_out >= 0.99 && worst_mse < 1e-3,
        format!(
            "min branch output {min_out:.5}, max mse {worst_mse:.2e} over {} nodes",
            seq.len()
        ),
    )
}

fn ce_insensitivity() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ok = true;
    let mut branch_differs = true;
    for _ in 0..100 {
        let truth = rng.gen_range(1..=255u8);
        let p_true = rng.gen_range(0.01..0.9);
        let make = |rng: &mut ChaCha8Rng| {
            let mut w: Vec<f64> = (0..CLASSES).map(|_| rng.gen_range(0.0..1.0)).collect();
            w[truth as usize - 1] = 0.0;
            let s: f64 = w.iter().sum();
            let mut q: Vec<f64> = w.iter().map(|x| x / s * (1.0 - p_true)).collect();
            q[truth as usize - 1] = p_true;
            Distribution255(q)
        };
        let (a, b) = (make(&mut rng), make(&mut rng));
        ok &= a != b && loss_ce(&a, truth) == loss_ce(&b, truth);
        let bits = occupancy_bits(truth);
        let ob = BranchVector8(std::array::from_fn(|j| if bits[j] { 0.9 } else { 0.1 }));
        let oc = BranchVector8(std::array::from_fn(|j| if bits[j] { 0.6 } else { 0.4 }));
        branch_differs &= loss_mse(&ob, bits) != loss_mse(&oc, bits);
    }
    outcome(
        ok,
        format!("100 distribution pairs with equal true-class mass gave identical CE: {ok}; mse separates them: {branch_differs}"),
    )
}

fn brute(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    a.iter()
        .map(|p| {
            b.iter()
                .map(|q| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / a.len() as f64
}

fn metric_oracles() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let depth = 7u8;
    let (mut cd_err, mut psnr_err) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let origin = [
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
        ];
        let scale = rng.gen_range(0.01..2.0);
        let mut cloud = || {
            let v: Vec<[u32; 3]> = (0..100)
                .map(|_| std::array::from_fn(|_| rng.gen_range(0..128)))
                .collect();
            QuantizedPointCloud::new(depth, v, origin, scale).unwrap()
        };
        let (a, b) = (cloud(), cloud());
        let world = |q: &QuantizedPointCloud| -> Vec<[f64; 3]> {
            q.voxels()
                .iter()
                .map(|v| std::array::from_fn(|k| origin[k] + scale * v[k] as f64))
                .collect()
        };
        let grid = |q: &QuantizedPointCloud| -> Vec<[f64; 3]> {
            q.voxels().iter().map(|v| v.map(f64::from)).collect()
        };
        let (wa, wb) = (world(&a), world(&b));
        let cd = (brute(&wa, &wb) + brute(&wb, &wa)) / 2.0;
        cd_err = cd_err.max((chamfer(&a, &b)? - cd).abs());
        let (ga, gb) = (grid(&a), grid(&b));
        let mse = brute(&ga, &gb).max(brute(&gb, &ga));
        let peak = 3.0 * ((1u64 << depth) - 1).pow(2) as f64;
        let psnr = 10.0 * (peak / mse).log10();
        psnr_err = psnr_err.max((d1_psnr(&a, &b, depth)? - psnr).abs());
    }
    let model = Model::new(ModelConfig::toy())?;
    let pc = synth(SynthKind::LidarRings, 3000, 11)?;
    let (bs, _) = encode(&pc, 7, 7, &model)?;
    let full = decode(&bs, &model)?;
    let zero = chamfer(&full, &quantize(&pc, 7)?)?;
    outcome(
        cd_err <= 1e-9 && psnr_err <= 1e-6 && zero == 0.0,
        format!("max chamfer error {cd_err:.2e}, max psnr error {psnr_err:.2e} dB, full-depth chamfer {zero}"),
    )
}

/// Per-seed results of the matched-budget ablation shared by the residual and
/// early-loss criteria.
struct AblationRun {
    seed: u64,
    /// base, ER, EMR
    early: [f64; 3],
    ad: [f64; 3],
    acos: [f64; 3],
}

fn early_ce(trace: &[LossRecord]) -> f64 {
    let main: Vec<f64> = trace
        .iter()
        .filter(|r| r.stage == Stage::Main)
        .map(|r| r.ce)
        .collect();
    let n = (main.len() / 10).max(1);
    main[..n].iter().sum::<f64>() / n as f64
}

fn ablation() -> Result<Vec<AblationRun>> {
    let corpus: Vec<NodeSequence> = [
        SynthKind::Plane,
        SynthKind::Sphere,
        SynthKind::GaussianClusters,
    ]
    .iter()
    .enumerate()
    .map(|(i, &k)| Ok(build(&quantize(&synth(k, 6000, 100 + i as u64)?, 7)?)))
    .collect::<Result<_>>()?;
    let sched = Schedule {
        branch_epochs: 2,
        main_epochs: 6,
        ..Schedule::default()
    };
    let mut runs = Vec::new();
    for seed in 0..5 {
        let mut run = AblationRun {
            seed,
            early: [0.0; 3],
            ad: [0.0; 3],
            acos: [0.0; 3],
        };
        for (j, v) in [Variant::Base, Variant::Er, Variant::Emr]
            .into_iter()
            .enumerate()
        {
            let model = Model::new(ModelConfig {
                seed,
                ..ModelConfig::desk().with_variant(v)
            })?;
            let out = train(model, &corpus, &sched)?;
            let stats = interclass_stats(&collect_features(&out.model, &corpus)?)?;
            run.early[j] = early_ce(&out.trace);
            run.ad[j] = stats.ad;
            run.acos[j] = stats.acos;
        }
        runs.push(run);
    }
    Ok(runs)
}

fn residual_mechanism(runs: &[AblationRun]) -> Result<Outcome> {
    let ad_wins = runs.iter().filter(|r| r.ad[1] > r.ad[0]).count();
    let acos_wins = runs.iter().filter(|r| r.acos[1] <= r.acos[0]).count();
    let wins = runs
        .iter()
        .filter(|r| r.ad[1] > r.ad[0] && r.acos[1] <= r.acos[0])
        .count();
    let lines: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: ad {:.4}->{:.4} acos {:.4}->{:.4}",
                r.seed, r.ad[0], r.ad[1], r.acos[0], r.acos[1]
            )
        })
        .collect();
    outcome(
        wins >= 4,
        format!(
            "{wins}/5 seeds (ad {ad_wins}/5, acos {acos_wins}/5); {}",
            lines.join("; ")
        ),
    )
}

fn early_loss(runs: &[AblationRun]) -> Result<Outcome> {
    let wins = runs.iter().filter(|r| r.early[2] <= r.early[0]).count();
    let lines: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: base {:.4} emr {:.4}",
                r.seed, r.early[0], r.early[2]
            )
        })
        .collect();
    outcome(wins >= 4, format!("{wins}/5 seeds; {}", lines.join("; ")))
}

fn main() -> ExitCode {
    let runs: OnceCell<std::result::Result<Vec<AblationRun>, String>> = OnceCell::new();
    let shared = |check: fn(&[AblationRun]) -> Result<Outcome>| -> Result<Outcome> {
        match runs.get_or_init(|| ablation().map_err(|e| e.to_string())) {
            Ok(r) => check(r),
            Err(e) => outcome(false, format!("error: {e}")),
        }
    };
    let criteria: Vec<(&str, Box<dyn Fn() -> Result<Outcome> + '_>)> = vec![
        ("lossless round trip", Box::new(lossless)),
        ("coder optimality", Box::new(coder_optimality)),
        ("uniform model codelength", Box::new(uniform_codelength)),
        ("gradient correctness", Box::new(gradients)),
        ("two-stage schedule freezes", Box::new(two_stage)),
        ("learning effect", Box::new(learning_effect)),
        (
            "residual inter-class direction",
            Box::new(|| shared(residual_mechanism)),
        ),
        ("branch convergence", Box::new(branch_convergence)),
        ("cross-entropy insensitivity", Box::new(ce_insensitivity)),
        ("metric oracles", Box::new(metric_oracles)),
        (
            "early-training loss ordering",
            Box::new(|| shared(early_loss)),
        ),
    ];
    let filter: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match run() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += !pass as usize;
        println!(
            "{} [{id:>2}] {name}: {detail} ({:.1} s)",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
