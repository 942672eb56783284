//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use approx::relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use udba::attention::{compute_attention, confidence_bundle, BinaryMap};
use udba::data::PhantomConfig;
use udba::harness::{run_grid, Checkpoint, Dataset, DatasetSource, EvalSettings, ExperimentSpec, SplitPart, TrainData, Trainer};
use udba::losses::{ctr, ctr_multiclass, ctr_with_grad, ctrm_loss_with_grad, ctrm_matrix, BaseLoss, LossConfig, LossValue, Regularizer};
use udba::metrics::{asd, dice, iou};
use udba::model::{FeatureNoise, Network, NetworkConfig};
use udba::ops::softmax_channels;
use udba::{Mask, Scalar, Tensor};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    check(elapsed.as_secs_f64() < limit_s as f64, || format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()))
}

fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> Mask {
    Mask::new(h, w, (0..h * w).map(|_| rng.random_bool(density)).collect()).unwrap()
}

fn attention_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..1000 {
        let pm = uniform(&mut rng, [1, 1, 8, 8], 0.0, 1.0);
        let pa = uniform(&mut rng, [1, 1, 8, 8], 0.0, 1.0);
        let bits: Vec<bool> = (0..64).map(|_| rng.random_bool(0.5)).collect();
        let mcm = BinaryMap::new([1, 8, 8], bits.clone()).unwrap();
        let got = compute_attention(&pm, &pa, &mcm).map_err(|e| e.to_string())?;
        for i in 0..64 {
            let (a, b) = (pm.data()[i], pa.data()[i]);
            let want = if bits[i] { if a >= b { a } else { b } } else { 0.0 };
            check(got.data()[i].to_bits() == want.to_bits(), || {
                format!("trial {trial} pixel {i}: {} vs {want}", got.data()[i])
            })?;
        }
    }
    within(t.elapsed(), 5)?;
    Ok(format!("1000 triples bitwise equal in {:.2}s", t.elapsed().as_secs_f64()))
}

fn mcm_invariants() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..1000 {
        let n = rng.random_range(2..=5);
        // Sharp logits make the two decoders agree often; flat ones rarely.
        let scale = [0.5, 3.0, 10.0][trial % 3];
        let main = uniform(&mut rng, [1, n, 8, 8], -scale, scale);
        let aux = uniform(&mut rng, [1, n, 8, 8], -scale, scale);
        let b = confidence_bundle(&main, &aux, [4, 2, 2]).map_err(|e| e.to_string())?;
        check(b.masks.intersection.is_subset_of(&b.masks.union), || format!("trial {trial}: intersection not in union"))?;
        check(b.mcm == b.masks.union.or(&b.masks.intersection).unwrap(), || format!("trial {trial}: mcm mismatch"))?;
        let floor = 1.0 / n as f64;
        for (i, (&on, &a)) in b.mcm.data().iter().zip(b.attention.map.data()).enumerate() {
            if on {
                check(a > floor && a <= 1.0, || format!("trial {trial} pixel {i}: attention {a} on mcm, N={n}"))?;
            } else {
                check(a == 0.0, || format!("trial {trial} pixel {i}: attention {a} off mcm"))?;
            }
        }
    }
    within(t.elapsed(), 10)?;
    Ok(format!("1000 pairs in {:.2}s", t.elapsed().as_secs_f64()))
}

fn random_onehot(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros([1, n, h, w]);
    for y in 0..h {
        for x in 0..w {
            t.set(0, rng.random_range(0..n), y, x, 1.0);
        }
    }
    t
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor<f64> {
    softmax_channels(&uniform(rng, [1, n, h, w], -2.0, 2.0))
}

fn fd_check(name: &str, probs: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> LossValue<f64>) -> Result<(), String> {
    let h = 1e-4;
    let analytic = f(probs).grad;
    for i in 0..probs.len() {
        let mut plus = probs.clone();
        plus.data_mut()[i] += h;
        let mut minus = probs.clone();
        minus.data_mut()[i] -= h;
        let fd = (f(&plus).value - f(&minus).value) / (2.0 * h);
        let a = analytic.data()[i];
        check(relative_eq!(a, fd, epsilon = 1e-9, max_relative = 1e-3), || format!("{name} entry {i}: analytic {a} vs fd {fd}"))?;
    }
    Ok(())
}

fn ctr_gradients() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let ct = uniform(&mut rng, [1, 1, 8, 8], 0.0, 1.0);
        let gt = random_onehot(&mut rng, 3, 8, 8);
        let probs = random_probs(&mut rng, 3, 8, 8);
        let gt1 = Tensor::from_vec([1, 1, 8, 8], gt.channel(0, 1).to_vec()).unwrap();
        let p1 = Tensor::from_vec([1, 1, 8, 8], probs.channel(0, 1).to_vec()).unwrap();
        fd_check("ctr", &p1, |p| ctr_with_grad(&ct, &gt1, p).unwrap())?;
        fd_check("ctr multiclass", &probs, |p| ctr_multiclass(&ct, &gt, p).unwrap())?;
        fd_check("ctrm", &probs, |p| ctrm_loss_with_grad(&ct, &gt, p).unwrap())?;
    }
    within(t.elapsed(), 30)?;
    Ok(format!("20 instances in {:.2}s", t.elapsed().as_secs_f64()))
}

fn ctr_hand_case() -> Outcome {
    let ct = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let gt = Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
    let pred = Tensor::<f64>::from_rows(&[&[0.0, 0.0], &[0.0, 1.0]]);
    let v = ctr(&ct, &gt, &pred).map_err(|e| e.to_string())?;
    check(v == 0.75, || format!("hand case gave {v}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..100 {
        let n = rng.random_range(2..=5);
        let (h, w) = (rng.random_range(2..=12), rng.random_range(2..=12));
        let ct = uniform(&mut rng, [1, 1, h, w], -1.0, 1.0);
        let gt = random_onehot(&mut rng, n, h, w);
        let probs = random_probs(&mut rng, n, h, w);
        let m = ctrm_matrix(&ct, &gt, &probs).map_err(|e| e.to_string())?;
        for (k, d) in m.diagonal().into_iter().enumerate() {
            let g = Tensor::from_vec([1, 1, h, w], gt.channel(0, k).to_vec()).unwrap();
            let p = Tensor::from_vec([1, 1, h, w], probs.channel(0, k).to_vec()).unwrap();
            let single = ctr(&ct, &g, &p).unwrap();
            check(d == single, || format!("trial {trial} class {k}: diagonal {d} vs ctr {single}"))?;
        }
    }
    Ok("hand case 0.75, 100 diagonal instances".into())
}

fn brute_asd(a: &Mask, b: &Mask, spacing: (f64, f64)) -> f64 {
    let (ba, bb) = (a.boundary(), b.boundary());
    let pa: Vec<_> = ba.points().collect();
    let pb: Vec<_> = bb.points().collect();
    let mean_to = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        from.iter()
            .map(|&(y, x)| {
                to.iter()
                    .map(|&(v, u)| {
                        let dy = (y as f64 - v as f64) * spacing.0;
                        let dx = (x as f64 - u as f64) * spacing.1;
                        (dy * dy + dx * dx).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    0.5 * (mean_to(&pa, &pb) + mean_to(&pb, &pa))
}

fn metric_oracles() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..100 {
        let (h, w) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let d = rng.random_range(0.05..0.9);
        let (a, b) = (random_mask(&mut rng, h, w, d), random_mask(&mut rng, h, w, d));
        let (dc, j) = (dice(&a, &b).unwrap(), iou(&a, &b).unwrap());
        check((j - dc / (2.0 - dc)).abs() <= 1e-9, || format!("trial {trial}: iou {j} vs dice {dc}"))?;
    }
    let mut done = 0;
    while done < 20 {
        let (h, w) = (rng.random_range(2..=32), rng.random_range(2..=32));
        let d = rng.random_range(0.1..0.8);
        let (a, b) = (random_mask(&mut rng, h, w, d), random_mask(&mut rng, h, w, d));
        if a.is_empty() || b.is_empty() {
            continue;
        }
        let spacing = (rng.random_range(0.5..3.0), rng.random_range(0.5..3.0));
        let (got, want) = (asd(&a, &b, spacing).unwrap(), brute_asd(&a, &b, spacing));
        check((got - want).abs() <= 1e-9, || format!("asd {got} vs brute force {want} on {h}x{w}"))?;
        done += 1;
    }
    within(t.elapsed(), 30)?;
    Ok(format!("100 dice/iou pairs, 20 asd masks in {:.2}s", t.elapsed().as_secs_f64()))
}

fn disabled_udba_identity() -> Outcome {
    let net = Network::<f64>::new(NetworkConfig::desk(4), 6).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut noise = FeatureNoise::new(ChaCha8Rng::seed_from_u64(7));
    for i in 0..10 {
        let x = uniform(&mut rng, [1, 1, 64, 64], 0.0, 1.0);
        let out = net.forward(&x, false, &mut noise).map_err(|e| e.to_string())?;
        let same = out.main_final.data().iter().zip(out.main_pass1.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        check(same && out.confidence.is_none(), || format!("input {i}: main_final differs from main_pass1"))?;
    }
    Ok("10 inputs bitwise identical".into())
}

fn overfit_spec(loss: LossConfig) -> ExperimentSpec {
    let mut spec = ExperimentSpec::desk();
    spec.data.source = DatasetSource::Phantom { config: PhantomConfig { num_volumes: 1, ..PhantomConfig::default() }, seed: 0 };
    spec.data.folds = 1;
    spec.network = NetworkConfig::desk(4);
    spec.loss = loss;
    spec.epochs = 200;
    spec.batch_size = 1;
    spec.optimizer.lr = 0.01;
    spec
}

/// Trains on the single phantom volume and returns the final loss and the
/// per-organ Dice on that same volume.
fn overfit<T: Scalar>(loss: LossConfig) -> Result<(f64, Vec<(String, f64)>), String> {
    let spec = overfit_spec(loss);
    let dataset = Dataset::open(&spec).map_err(|e| e.to_string())?;
    let data = TrainData::<T>::load(&dataset).map_err(|e| e.to_string())?;
    check(data.fit.len() == 8, || format!("expected 8 training slices, got {}", data.fit.len()))?;
    let mut trainer = Trainer::<T>::new(spec.clone()).map_err(|e| e.to_string())?;
    let summary = trainer.run(&data, None, spec.epochs).map_err(|e| e.to_string())?;
    let loss = summary.final_loss.unwrap_or(f64::NAN);
    let vol = dataset.load::<T>(&dataset.ids(SplitPart::Train)[0]).map_err(|e| e.to_string())?;
    let settings = EvalSettings { udba: spec.loss.udba, seed: spec.seed, maps_dir: None };
    let res = udba::harness::evaluate::evaluate_volumes(trainer.network(), &[vol], &data.organs, &settings)
        .map_err(|e| e.to_string())?;
    Ok((loss, res[0].organs.iter().map(|o| (o.organ.clone(), o.dice)).collect()))
}

fn organ_dice(d: &[(String, f64)], organ: &str) -> f64 {
    d.iter().find(|(o, _)| o == organ).map_or(f64::NAN, |(_, v)| *v)
}

fn fmt_dice(d: &[(String, f64)]) -> String {
    d.iter().map(|(o, v)| format!("{o}={v:.3}")).collect::<Vec<_>>().join(" ")
}

fn phantom_overfit() -> Outcome {
    let t = Instant::now();
    let ce = LossConfig { base: BaseLoss::Ce, regularizer: Regularizer::None, udba: false };
    let (loss, d) = overfit::<f32>(ce)?;
    let (heart, tube) = (organ_dice(&d, "heart"), organ_dice(&d, "esophagus"));
    check(loss.is_finite(), || format!("CE final loss {loss}"))?;
    check(heart >= 0.95 && tube >= 0.80, || format!("CE dice {}", fmt_dice(&d)))?;
    let mut notes = vec![format!("CE {}", fmt_dice(&d))];
    for cfg in [LossConfig { udba: true, ..ce }, LossConfig { regularizer: Regularizer::Ctrm, udba: true, ..ce }] {
        let (loss, d) = overfit::<f32>(cfg)?;
        check(loss.is_finite() && d.iter().all(|(_, v)| v.is_finite()), || format!("{cfg} diverged: loss {loss}"))?;
        notes.push(format!("{cfg} loss {loss:.4} {}", fmt_dice(&d)));
    }
    within(t.elapsed(), 600)?;
    Ok(format!("{} in {:.0}s", notes.join("; "), t.elapsed().as_secs_f64()))
}

fn ablation_smoke() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut spec = ExperimentSpec::desk();
    spec.epochs = 5;
    let report = run_grid::<f64>(&spec, dir.path(), SplitPart::Test).map_err(|e| e.to_string())?;
    let want = [
        "Dice", "Dice(UDBA)", "Dice+CTR", "Dice+CTR(UDBA)", "Dice+CTRM", "Dice+CTRM(UDBA)",
        "CE", "CE(UDBA)", "CE+CTR", "CE+CTR(UDBA)", "CE+CTRM", "CE+CTRM(UDBA)",
    ];
    check(report.is_complete(), || format!("failed cells: {:?}", report.failures()))?;
    check(report.dice.labels() == want, || format!("labels {:?}", report.dice.labels()))?;
    for row in &report.dice.rows {
        check(row.cells.iter().all(|c| c.as_ref().is_some_and(|s| s.mean.is_finite())), || {
            format!("{}: non-finite or missing dice", row.label)
        })?;
    }
    within(t.elapsed(), 900)?;
    Ok(format!("12 cells in {:.0}s", t.elapsed().as_secs_f64()))
}

fn rel_close(a: f64, b: f64) -> bool {
    a.is_finite() && (a - b).abs() <= 1e-6 * a.abs().max(b.abs())
}

fn determinism() -> Outcome {
    let mut spec = ExperimentSpec::desk();
    spec.epochs = 4;
    spec.loss = LossConfig { base: BaseLoss::Ce, regularizer: Regularizer::Ctrm, udba: true };
    let dataset = Dataset::open(&spec).map_err(|e| e.to_string())?;
    let data = TrainData::<f64>::load(&dataset).map_err(|e| e.to_string())?;
    let full = |spec: &ExperimentSpec| -> Result<f64, String> {
        let mut tr = Trainer::<f64>::new(spec.clone()).map_err(|e| e.to_string())?;
        let s = tr.run(&data, None, spec.epochs).map_err(|e| e.to_string())?;
        Ok(s.final_loss.unwrap_or(f64::NAN))
    };
    let (a, b) = (full(&spec)?, full(&spec)?);
    check(rel_close(a, b), || format!("repeat runs gave {a} and {b}"))?;

    let mut first = Trainer::<f64>::new(spec.clone()).map_err(|e| e.to_string())?;
    first.run(&data, None, 2).map_err(|e| e.to_string())?;
    let bytes = first.checkpoint().to_bytes().map_err(|e| e.to_string())?;
    drop(first);
    let ck = Checkpoint::<f64>::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::from_checkpoint(ck).map_err(|e| e.to_string())?;
    let c = resumed.run(&data, None, spec.epochs).map_err(|e| e.to_string())?.final_loss.unwrap_or(f64::NAN);
    check(rel_close(a, c), || format!("uninterrupted {a} vs resumed {c}"))?;
    Ok(format!("final loss {a:.12} (repeat {b:.12}, resumed {c:.12})"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("attention matches scalar reference", attention_oracle),
        ("agreement map invariants", mcm_invariants),
        ("CTR/CTRM gradients vs finite differences", ctr_gradients),
        ("CTR hand case and CTRM diagonal", ctr_hand_case),
        ("metric oracles", metric_oracles),
        ("disabled attention identity", disabled_udba_identity),
        ("phantom overfit", phantom_overfit),
        ("ablation grid smoke run", ablation_smoke),
        ("determinism and resume", determinism),
    ];
    let mut failed = 0;
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k < i + 1) {
            continue;
        }
        match run() {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
