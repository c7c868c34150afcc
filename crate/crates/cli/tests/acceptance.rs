//! Acceptance criteria, one PASS/FAIL line each. Runs the bundled sweeps
//! through the binary, so expect several minutes.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use tempfile::TempDir;
use vqanon::autodiff::{gradient_check, Tape, Tensor2D, Var};
use vqanon::f0::{add_awgn, f0_stats, linear_shift, measured_snr, F0Stats, F0Track, DEFAULT_FRAME_RATE};
use vqanon::harness::{median, summarize, ConditionSummary, F0_REPORT_FILE, RESULTS_FILE};
use vqanon::metrics::{eer, linkability, parse_csv, ScoreSet, DEFAULT_BINS};
use vqanon::vq::{
    combined_loss, commitment_loss, commitment_loss_on_tape, quantize, vq_loss, vq_loss_on_tape, Codebook,
    DEFAULT_BETA, DEFAULT_DECAY, DEFAULT_LAPLACE_EPS,
};

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2D {
    let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor2D::new(rows, cols, data).unwrap()
}

fn dist(x: &[f64], p: &[f64]) -> f64 {
    p.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum()
}

fn brute_force(x: &[f64], protos: &[Vec<f64>]) -> usize {
    let dists: Vec<f64> = protos.iter().map(|p| dist(x, p)).collect();
    let best = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    dists.iter().position(|&d| d == best).unwrap()
}

// ---- gradients ----

type Gen = Box<dyn Fn(&mut ChaCha8Rng) -> (Tensor2D, Vec<Tensor2D>)>;
type Build = Box<dyn Fn(&mut Tape, Var, &[Tensor2D]) -> vqanon::Result<Var>>;

fn weighted(t: &mut Tape, x: Var, w: &Tensor2D) -> vqanon::Result<Var> {
    let w = t.constant(w.clone());
    let p = t.mul(x, w)?;
    Ok(t.sum(p))
}

fn off_kink(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2D {
    let mut t = random(r, rows, cols);
    for v in t.data_mut() {
        while v.abs() < 1e-3 {
            *v = r.random_range(-2.0..2.0);
        }
    }
    t
}

fn gradient_ops() -> Vec<(&'static str, Gen, Build)> {
    vec![
        (
            "linear/x",
            Box::new(|r| {
                (
                    random(r, 4, 3),
                    vec![random(r, 3, 5), random(r, 1, 5), random(r, 4, 5)],
                )
            }),
            Box::new(|t, x, a| {
                let (w, b) = (t.constant(a[0].clone()), t.constant(a[1].clone()));
                let y = t.linear(x, w, b)?;
                weighted(t, y, &a[2])
            }),
        ),
        (
            "linear/w",
            Box::new(|r| {
                (
                    random(r, 3, 5),
                    vec![random(r, 4, 3), random(r, 1, 5), random(r, 4, 5)],
                )
            }),
            Box::new(|t, w, a| {
                let (x, b) = (t.constant(a[0].clone()), t.constant(a[1].clone()));
                let y = t.linear(x, w, b)?;
                weighted(t, y, &a[2])
            }),
        ),
        (
            "linear/b",
            Box::new(|r| {
                (
                    random(r, 1, 5),
                    vec![random(r, 4, 3), random(r, 3, 5), random(r, 4, 5)],
                )
            }),
            Box::new(|t, b, a| {
                let (x, w) = (t.constant(a[0].clone()), t.constant(a[1].clone()));
                let y = t.linear(x, w, b)?;
                weighted(t, y, &a[2])
            }),
        ),
        (
            "relu",
            Box::new(|r| (off_kink(r, 5, 4), vec![random(r, 5, 4)])),
            Box::new(|t, x, a| {
                let y = t.relu(x);
                weighted(t, y, &a[0])
            }),
        ),
        (
            "softmax_cross_entropy",
            Box::new(|r| (random(r, 6, 4), vec![])),
            Box::new(|t, x, _| t.softmax_cross_entropy(x, &[0, 3, 1, 2, 3, 0])),
        ),
        (
            "squared_distance",
            Box::new(|r| (random(r, 4, 3), vec![random(r, 4, 3)])),
            Box::new(|t, x, a| {
                let b = t.constant(a[0].clone());
                let l = t.squared_distance(x, b)?;
                let r = t.squared_distance(b, x)?;
                t.add(l, r)
            }),
        ),
        (
            "gather_rows",
            Box::new(|r| (random(r, 5, 3), vec![random(r, 7, 3)])),
            Box::new(|t, x, a| {
                let g = t.gather_rows(x, &[4, 0, 0, 2, 4, 1, 4])?;
                weighted(t, g, &a[0])
            }),
        ),
        (
            "add/mul/scale/sum",
            Box::new(|r| (random(r, 3, 4), vec![random(r, 3, 4), random(r, 3, 4)])),
            Box::new(|t, x, a| {
                let c = t.constant(a[0].clone());
                let y = t.add(x, c)?;
                let y = t.mul(y, x)?;
                let y = t.scale(y, -1.75);
                weighted(t, y, &a[1])
            }),
        ),
        (
            "encoder/classifier stack",
            Box::new(|r| loop {
                let x = random(r, 6, 4);
                let w1 = random(r, 4, 5).map(|v| v * 0.35);
                let b1 = random(r, 1, 5);
                let w2 = random(r, 5, 3).map(|v| v * 0.3);
                let b2 = random(r, 1, 3);
                let z = x.matmul(&w1).unwrap();
                let kink = z
                    .row_iter()
                    .any(|row| row.iter().zip(b1.data()).any(|(a, b)| (a + b).abs() < 1e-3));
                if !kink {
                    break (x, vec![w1, b1, w2, b2]);
                }
            }),
            Box::new(|t, x, a| {
                let (w1, b1) = (t.constant(a[0].clone()), t.constant(a[1].clone()));
                let h = t.linear(x, w1, b1)?;
                let h = t.relu(h);
                let (w2, b2) = (t.constant(a[2].clone()), t.constant(a[3].clone()));
                let z = t.linear(h, w2, b2)?;
                t.softmax_cross_entropy(z, &[0, 1, 2, 2, 1, 0])
            }),
        ),
    ]
}

fn gradients() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (k, (name, gen, build)) in gradient_ops().into_iter().enumerate() {
        for point in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(7000 + 1000 * k as u64 + point);
            let (x, aux) = gen(&mut rng);
            let err = gradient_check(|t, v| build(t, v, &aux), &x, 1e-5).map_err(|e| e.to_string())?;
            ensure!(err < 1e-4, "{name}: relative error {err:e} at point {point}");
            worst = worst.max(err);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1}s");
    Ok(format!("worst relative error {worst:.2e}, {secs:.1}s"))
}

// ---- quantizer ----

fn quantize_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31337);
    let mut ties = 0;
    for case in 0..1000 {
        let (v, d, j) = (
            rng.random_range(1..=24),
            rng.random_range(1..=6),
            rng.random_range(1..=16),
        );
        let grid = case % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| {
            if grid {
                rng.random_range(-2i32..=2) as f64
            } else {
                rng.random_range(-3.0..3.0)
            }
        };
        let protos: Vec<Vec<f64>> = (0..v).map(|_| (0..d).map(|_| draw(&mut rng)).collect()).collect();
        let h: Vec<Vec<f64>> = (0..j).map(|_| (0..d).map(|_| draw(&mut rng)).collect()).collect();
        let cb = Codebook::new(
            Tensor2D::from_rows(&protos).unwrap(),
            DEFAULT_DECAY,
            DEFAULT_LAPLACE_EPS,
        )
        .map_err(|e| e.to_string())?;
        let out = quantize(&Tensor2D::from_rows(&h).unwrap(), &cb).map_err(|e| e.to_string())?;
        for (row, x) in h.iter().enumerate() {
            let want = brute_force(x, &protos);
            let best = dist(x, &protos[want]);
            ties += usize::from(protos.iter().filter(|p| dist(x, p) == best).count() > 1);
            ensure!(
                out.indices[row] == want,
                "case {case} row {row}: {} vs {want}",
                out.indices[row]
            );
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 5.0, "took {secs:.2}s");
    Ok(format!("1000 calls exact, {ties} tied rows, {secs:.2}s"))
}

fn loss_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    ensure!(DEFAULT_BETA == 0.25, "default beta {DEFAULT_BETA}");
    for _ in 0..200 {
        let h = random(&mut rng, 6, 4);
        let e = random(&mut rng, 5, 4);
        let idx: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
        let q = e.select_rows(&idx);
        let a = vq_loss(&h, &q).unwrap();
        let b = commitment_loss(&h, &q).unwrap();
        ensure!(a == b, "l_vq {a} != l_vq_reg {b}");
        let task = rng.random_range(0.0..10.0);
        let total = combined_loss(task, a, b, DEFAULT_BETA).unwrap().total;
        ensure!((total - (task + a + 0.25 * b)).abs() <= 1e-12, "total {total}");

        for codebook_side in [true, false] {
            let mut tape = Tape::new();
            let hv = tape.param(h.clone());
            let ev = tape.param(e.clone());
            let qv = tape.gather_rows(ev, &idx).unwrap();
            let l = if codebook_side {
                vq_loss_on_tape(&mut tape, hv, qv)
            } else {
                commitment_loss_on_tape(&mut tape, hv, qv)
            }
            .unwrap();
            tape.backward(l).unwrap();
            let zero = |g: Option<&Tensor2D>| g.is_none_or(|g| g.data().iter().all(|&x| x == 0.0));
            let (moved, still) = if codebook_side { (ev, hv) } else { (hv, ev) };
            ensure!(zero(tape.grad(still)), "gradient leaked across the stop-gradient");
            ensure!(!zero(tape.grad(moved)), "no gradient on the trained side");
            if !codebook_side {
                let g = tape.grad(hv).unwrap();
                for (jr, &k) in idx.iter().enumerate() {
                    for c in 0..4 {
                        let want = 2.0 * (h.get(jr, c) - e.get(k, c));
                        ensure!(
                            (g.get(jr, c) - want).abs() < 1e-12,
                            "commitment gradient {} vs {want}",
                            g.get(jr, c)
                        );
                    }
                }
            }
            if codebook_side {
                let g = tape.grad(ev).unwrap();
                for i in 0..5 {
                    for c in 0..4 {
                        let want: f64 = (0..6)
                            .filter(|&jr| idx[jr] == i)
                            .map(|jr| 2.0 * (e.get(i, c) - h.get(jr, c)))
                            .sum();
                        ensure!(
                            (g.get(i, c) - want).abs() < 1e-12,
                            "codebook gradient {} vs {want}",
                            g.get(i, c)
                        );
                    }
                }
            }
        }
    }
    Ok("symmetry exact, gradients separated, total within 1e-12 at beta 0.25".into())
}

fn lloyd(data: &[Vec<f64>], init: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut cents = init.to_vec();
    let mut assign = vec![usize::MAX; data.len()];
    loop {
        let next: Vec<usize> = data.iter().map(|x| brute_force(x, &cents)).collect();
        if next == assign {
            return cents;
        }
        assign = next;
        for (k, c) in cents.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = data
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == k)
                .map(|(x, _)| x)
                .collect();
            if !members.is_empty() {
                for (d, v) in c.iter_mut().enumerate() {
                    *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                }
            }
        }
    }
}

fn ema_fixed_point() -> Check {
    let start = Instant::now();
    let mut slowest = 0;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let (k, d, per) = (6, 4, 40);
        let centers: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let data: Vec<Vec<f64>> = centers
            .iter()
            .flat_map(|c| {
                (0..per)
                    .map(|_| c.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect())
                    .collect::<Vec<_>>()
            })
            .collect();
        let init: Vec<Vec<f64>> = (0..k).map(|i| data[i * per].clone()).collect();
        let want = lloyd(&data, &init);
        let batch = Tensor2D::from_rows(&data).unwrap();
        let mut cb = Codebook::new(Tensor2D::from_rows(&init).unwrap(), 0.9, DEFAULT_LAPLACE_EPS).unwrap();
        let mut reached = None;
        for step in 1..=500 {
            let qb = quantize(&batch, &cb).unwrap();
            cb.ema_update(&batch, &qb.indices).unwrap();
            let err = (0..k)
                .flat_map(|i| (0..d).map(move |c| (i, c)))
                .map(|(i, c)| (cb.prototypes().get(i, c) - want[i][c]).abs())
                .fold(0.0, f64::max);
            if err < 1e-6 {
                reached = Some(step);
                break;
            }
        }
        let step = reached.ok_or(format!("seed {seed}: not within 1e-6 after 500 steps"))?;
        slowest = slowest.max(step);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.2}s");
    Ok(format!("5 batches, within 1e-6 by step {slowest}, {secs:.2}s"))
}

fn straight_through() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for trial in 0..300 {
        let h = random(&mut rng, 5, 4);
        let cb = Codebook::new(random(&mut rng, 6, 4), DEFAULT_DECAY, DEFAULT_LAPLACE_EPS).unwrap();
        let q = quantize(&h, &cb).unwrap().q;
        let w = random(&mut rng, 4, 3);
        let b = random(&mut rng, 1, 3);
        let m = random(&mut rng, 5, 4);
        let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
        let downstream = |t: &mut Tape, x: Var| match trial % 3 {
            0 => {
                let (wv, bv) = (t.constant(w.clone()), t.constant(b.clone()));
                let z = t.linear(x, wv, bv).unwrap();
                t.softmax_cross_entropy(z, &labels).unwrap()
            }
            1 => {
                let r = t.relu(x);
                weighted(t, r, &m).unwrap()
            }
            _ => {
                let sq = t.mul(x, x).unwrap();
                let s = t.sum(sq);
                t.scale(s, 0.3)
            }
        };
        let mut t1 = Tape::new();
        let hv = t1.param(h.clone());
        let st = t1.straight_through(hv, q.clone()).unwrap();
        let l1 = downstream(&mut t1, st);
        t1.backward(l1).unwrap();
        let mut t2 = Tape::new();
        let qv = t2.param(q.clone());
        let l2 = downstream(&mut t2, qv);
        t2.backward(l2).unwrap();
        let (gh, gq) = (t1.grad(hv).unwrap(), t2.grad(qv).unwrap());
        ensure!(
            gh.data()
                .iter()
                .zip(gq.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            "trial {trial}: grad_h differs from grad_q"
        );
    }
    Ok("300 trials over 3 downstream losses, bitwise equal".into())
}

// ---- metrics ----

fn draw<D: Distribution<f64>>(d: &D, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| d.sample(&mut rng)).collect()
}

fn pdf(x: f64, mu: f64, sd: f64) -> f64 {
    let z = (x - mu) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

/// Closed-form likelihood ratio, Simpson-integrated.
fn analytic_d_sys(mm: f64, sm: f64, mn: f64, sn: f64) -> f64 {
    let lo = (mm - 12.0 * sm).min(mn - 12.0 * sn);
    let hi = (mm + 12.0 * sm).max(mn + 12.0 * sn);
    let steps = 200_000;
    let h = (hi - lo) / steps as f64;
    let f = |s: f64| {
        let (pm, pn) = (pdf(s, mm, sm), pdf(s, mn, sn));
        if pm == 0.0 {
            0.0
        } else {
            pm * ((pm - pn) / (pm + pn)).max(0.0)
        }
    };
    let inner: f64 = (1..steps)
        .map(|i| if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h))
        .sum();
    (f(lo) + f(hi) + inner) * h / 3.0
}

fn metric_oracles() -> Check {
    let triple = eer(&ScoreSet::new(vec![0.9, 0.7, 0.3], vec![0.8, 0.2, 0.1]))
        .unwrap()
        .eer;
    ensure!((triple - 1.0 / 3.0).abs() < 1e-12, "triple gives {triple}");

    let n = 10_000;
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let same = ScoreSet::new(draw(&std_normal, n, 1), draw(&std_normal, n, 2));
    let (e, d) = (
        eer(&same).unwrap().eer,
        linkability(&same, DEFAULT_BINS).unwrap().d_sys,
    );
    ensure!(
        (e - 0.5).abs() <= 0.02 && d <= 0.05,
        "identical: eer {e}, d_sys {d}"
    );

    let apart = ScoreSet::new(
        draw(&Uniform::new(0.6, 1.0).unwrap(), n, 3),
        draw(&Uniform::new(-1.0, 0.4).unwrap(), n, 4),
    );
    let (e2, d2) = (
        eer(&apart).unwrap().eer,
        linkability(&apart, DEFAULT_BINS).unwrap().d_sys,
    );
    ensure!(e2 <= 0.01 && d2 >= 0.95, "disjoint: eer {e2}, d_sys {d2}");

    let mut gap = 0.0f64;
    for (i, &(mm, sm, mn, sn)) in [(1.0, 1.0, 0.0, 1.0), (2.0, 1.0, 0.0, 1.0), (0.5, 0.8, 0.0, 1.2)]
        .iter()
        .enumerate()
    {
        let s = ScoreSet::new(
            draw(&Normal::new(mm, sm).unwrap(), 50_000, 10 + i as u64),
            draw(&Normal::new(mn, sn).unwrap(), 50_000, 20 + i as u64),
        );
        let got = linkability(&s, DEFAULT_BINS).unwrap().d_sys;
        let want = analytic_d_sys(mm, sm, mn, sn);
        ensure!(
            (got - want).abs() <= 0.02,
            "gaussian case {i}: {got} vs analytic {want}"
        );
        gap = gap.max((got - want).abs());
    }
    Ok(format!(
        "triple 1/3; identical eer {e:.3} d_sys {d:.3}; disjoint eer {e2:.3} d_sys {d2:.3}; gaussian gap {gap:.3}"
    ))
}

// ---- F0 ----

fn random_track(rng: &mut ChaCha8Rng, len: usize, mean: f64, std: f64) -> F0Track {
    let normal = Normal::new(mean, std).unwrap();
    let voiced: Vec<bool> = (0..len).map(|_| rng.random_bool(0.8)).collect();
    let values = voiced
        .iter()
        .map(|&v| if v { normal.sample(rng).max(50.0) } else { 0.0 })
        .collect();
    F0Track::new(values, voiced, DEFAULT_FRAME_RATE).unwrap()
}

fn f0_transforms(sweep: &Path) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (m, s) = (rng.random_range(90.0..250.0), rng.random_range(5.0..30.0));
        let track = random_track(&mut rng, 500, m, s);
        let src = f0_stats(&track).unwrap();
        let tgt = F0Stats {
            mean: rng.random_range(100.0..250.0),
            std: rng.random_range(5.0..30.0),
            voiced_count: 0,
        };
        let got = f0_stats(&linear_shift(&track, &src, &tgt).unwrap()).unwrap();
        worst = worst
            .max((got.mean - tgt.mean).abs())
            .max((got.std - tgt.std).abs());
    }
    ensure!(worst <= 1e-9, "shift misses target by {worst:e}");

    let mut snrs = Vec::new();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let track = random_track(&mut rng, 14_000, 150.0, 20.0);
        ensure!(
            track.voiced_count() >= 10_000,
            "only {} voiced frames",
            track.voiced_count()
        );
        let snr = measured_snr(&track, &add_awgn(&track, 15.0, &mut rng).unwrap()).unwrap();
        ensure!((snr - 15.0).abs() <= 0.5, "seed {seed}: measured {snr:.3} dB");
        snrs.push(snr);
    }

    // Medians across seeds per shifted condition, as for the sweep metrics.
    let text = fs::read_to_string(sweep.join(F0_REPORT_FILE)).map_err(|e| e.to_string())?;
    let mut rows: BTreeMap<String, (Vec<f64>, f64)> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[0].starts_with("f0-shift") {
            let e = rows.entry(f[0].to_string()).or_default();
            e.0.push(f[2].parse().unwrap());
            e.1 = f[3].parse().unwrap();
        }
    }
    ensure!(!rows.is_empty(), "no shifted rows in {F0_REPORT_FILE}");
    let mut probes = Vec::new();
    for (name, (accs, chance)) in &rows {
        let med = median(accs).unwrap();
        let worst = accs.iter().map(|a| (a - chance).abs()).fold(0.0, f64::max);
        ensure!(
            (med - chance).abs() <= 0.05,
            "{name}: median probe {med:.3} vs chance {chance:.3}"
        );
        probes.push(format!(
            "{name} median {med:.3} (chance {chance:.3}, worst seed off by {worst:.3})"
        ));
    }
    let (lo, hi) = snrs
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), &s| (a.min(s), b.max(s)));
    Ok(format!(
        "shift error {worst:.1e}; SNR {lo:.2}..{hi:.2} dB; {}",
        probes.join(", ")
    ))
}

// ---- experiments through the binary ----

fn vqanon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqanon"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn sweep(config: Option<&Path>, out: &Path) -> std::result::Result<(Vec<ConditionSummary>, f64), String> {
    let start = Instant::now();
    let mut args = vec!["sweep", "--out", out.to_str().unwrap()];
    if let Some(c) = config {
        args.extend(["--config", c.to_str().unwrap()]);
    }
    let o = vqanon(&args);
    let secs = start.elapsed().as_secs_f64();
    if !o.status.success() {
        return Err(format!(
            "sweep exited {:?}: {}",
            o.status.code(),
            String::from_utf8_lossy(&o.stderr)
        ));
    }
    let path = out.join(RESULTS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| e.to_string())?;
    let reports = parse_csv(&text, &path).map_err(|e| e.to_string())?;
    Ok((summarize(&reports), secs))
}

fn by_name<'a>(s: &'a [ConditionSummary], name: &str) -> std::result::Result<&'a ConditionSummary, String> {
    s.iter()
        .find(|c| c.condition == name)
        .ok_or(format!("no condition {name}"))
}

fn table(s: &[ConditionSummary]) -> String {
    s.iter()
        .map(|c| {
            format!(
                "{} cer {:.3} probe {:.3} eer {:.3} d_sys {:.3}",
                c.condition, c.content_error_rate, c.speaker_probe_accuracy, c.eer, c.d_sys
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// Conditions ordered from no-VQ through shrinking V.
fn ordered(s: &[ConditionSummary]) -> std::result::Result<Vec<&ConditionSummary>, String> {
    ["no-vq", "vq-256", "vq-128", "vq-64"]
        .iter()
        .map(|n| by_name(s, n))
        .collect()
}

fn trend_a(s: &[ConditionSummary]) -> Check {
    let o = ordered(s)?;
    let p: Vec<f64> = o.iter().map(|c| c.speaker_probe_accuracy).collect();
    ensure!(
        p[1..].iter().all(|&x| x < p[0]),
        "no-VQ probe {:.3} not strictly highest: {p:?}",
        p[0]
    );
    ensure!(
        p.windows(2).all(|w| w[1] <= w[0]),
        "probe increases as V shrinks: {p:?}"
    );
    Ok(format!("probe {p:.3?}"))
}

fn trend_b(s: &[ConditionSummary]) -> Check {
    let o = ordered(s)?;
    let e: Vec<f64> = o.iter().map(|c| c.eer).collect();
    ensure!(
        e.windows(2).all(|w| w[1] >= w[0]),
        "EER decreases as V shrinks: {e:?}"
    );
    ensure!(
        e[3] >= e[0] + 0.05,
        "EER(64) {:.3} < EER(no-VQ) {:.3} + 0.05",
        e[3],
        e[0]
    );
    Ok(format!("eer {e:.3?}"))
}

fn trend_c(s: &[ConditionSummary]) -> Check {
    let o = ordered(s)?;
    let c: Vec<f64> = o.iter().map(|c| c.content_error_rate).collect();
    ensure!(
        c.windows(2).all(|w| w[1] >= w[0]),
        "content error decreases as V shrinks: {c:?}"
    );
    Ok(format!("content error {c:.4?}"))
}

fn trend_d(s: &[ConditionSummary]) -> Check {
    let o = ordered(s)?;
    for a in &o {
        for b in &o {
            if a.eer < b.eer {
                ensure!(
                    a.d_sys > b.d_sys,
                    "{} eer {:.3} < {} eer {:.3} but d_sys {:.3} <= {:.3}",
                    a.condition,
                    a.eer,
                    b.condition,
                    b.eer,
                    a.d_sys,
                    b.d_sys
                );
            }
        }
    }
    let d: Vec<f64> = o.iter().map(|c| c.d_sys).collect();
    Ok(format!("d_sys {d:.3?}"))
}

fn capacity(cap: &[ConditionSummary], main: &[ConditionSummary]) -> Check {
    let (d2, d6) = (by_name(cap, "vq-64-depth-2")?, by_name(cap, "vq-64-depth-6")?);
    ensure!(
        d6.content_error_rate <= d2.content_error_rate,
        "depth 6 content error {:.4} > depth 2 {:.4}",
        d6.content_error_rate,
        d2.content_error_rate
    );
    // Privacy gain over no-VQ, against both depth 2 and the sweep's V=64 run.
    let base = by_name(main, "no-vq")?.eer;
    let gain6 = d6.eer - base;
    for (label, other) in [("depth 2", d2.eer), ("sweep vq-64", by_name(main, "vq-64")?.eer)] {
        let gain = other - base;
        ensure!(
            gain6 >= gain - 0.03,
            "depth 6 EER gain {gain6:.3} loses more than 0.03 against {label} gain {gain:.3}"
        );
    }
    Ok(format!(
        "content error {:.4} (d6) vs {:.4} (d2); eer {:.3} (d6) vs {:.3} (d2)",
        d6.content_error_rate, d2.content_error_rate, d6.eer, d2.eer
    ))
}

// ---- determinism ----

const TINY: &str = r#"
[corpus]
num_speakers = 3
num_content_classes = 6
frame_dim = 8
utterances_per_speaker = 4
frames_per_utterance = 45
seed = 5

[model]
hidden_dim = 16
codebook_size = 12
epochs = 2
batch_utterances = 2
learning_rate = 3e-3
"#;

const CONDITIONS: &str = r#"
[f0]
shift_to_common_target = true
awgn_snr_db = 15.0

[[conditions]]
name = "no-vq"
codebook_size = "none"
seeds = [0, 1]

[[conditions]]
name = "vq-12"
codebook_size = 12
seeds = [0, 1]
"#;

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Every command, in one output tree, returning (stdout per command, files).
type Rerun = (Vec<Vec<u8>>, BTreeMap<PathBuf, Vec<u8>>);

fn run_all(dir: &Path, config: &Path, plan: &Path, track: &Path) -> std::result::Result<Rerun, String> {
    let out = dir.join("out");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (c, corpus, run, ev) = (
        s(config),
        s(&out.join("corpus")),
        s(&out.join("run")),
        s(&out.join("eval")),
    );
    let ckpt = s(&out.join("run/model.ckpt"));
    let commands: Vec<Vec<String>> = vec![
        vec![
            "gen-data".into(),
            "--config".into(),
            c.clone(),
            "--out".into(),
            corpus.clone(),
        ],
        vec![
            "train".into(),
            "--config".into(),
            c,
            "--corpus".into(),
            corpus.clone(),
            "--out".into(),
            run,
        ],
        vec![
            "eval".into(),
            "--corpus".into(),
            corpus,
            "--checkpoint".into(),
            ckpt,
            "--out".into(),
            ev,
            "--dump-features".into(),
        ],
        vec![
            "sweep".into(),
            "--config".into(),
            s(plan),
            "--out".into(),
            s(&out.join("sweep")),
        ],
        vec![
            "f0".into(),
            "--in".into(),
            s(track),
            "--out".into(),
            s(&out.join("f0.txt")),
            "--target-mean".into(),
            "120".into(),
            "--target-std".into(),
            "15".into(),
            "--snr-db".into(),
            "15".into(),
        ],
    ];
    let mut stdouts = Vec::new();
    for args in &commands {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = vqanon(&args);
        if !o.status.success() {
            return Err(format!(
                "{} exited {:?}: {}",
                args[0],
                o.status.code(),
                String::from_utf8_lossy(&o.stderr)
            ));
        }
        stdouts.push(o.stdout);
    }
    let files = snapshot(&out);
    fs::remove_dir_all(&out).map_err(|e| e.to_string())?;
    Ok((stdouts, files))
}

fn determinism() -> Check {
    let tmp = TempDir::new().map_err(|e| e.to_string())?;
    let config = tmp.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let plan = tmp.path().join("plan.toml");
    fs::write(&plan, format!("{TINY}{CONDITIONS}")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let track = tmp.path().join("track.txt");
    fs::write(&track, random_track(&mut rng, 2000, 160.0, 20.0).to_text()).unwrap();
    let (out_a, files_a) = run_all(tmp.path(), &config, &plan, &track)?;
    let (out_b, files_b) = run_all(tmp.path(), &config, &plan, &track)?;
    ensure!(out_a == out_b, "stdout differs between reruns");
    ensure!(
        files_a.keys().eq(files_b.keys()),
        "file sets differ between reruns"
    );
    for (path, bytes) in &files_a {
        ensure!(
            &files_b[path] == bytes,
            "{} differs between reruns",
            path.display()
        );
    }
    Ok(format!(
        "5 commands rerun, {} files byte-identical",
        files_a.len()
    ))
}

// ---- driver ----

fn report(name: &str, check: impl FnOnce() -> Check) -> bool {
    let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    match result {
        Ok(detail) => {
            println!("PASS {name}: {detail}");
            true
        }
        Err(why) => {
            println!("FAIL {name}: {why}");
            false
        }
    }
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= report("gradient correctness", gradients);
    ok &= report("quantization oracle", quantize_oracle);
    ok &= report("loss algebra", loss_algebra);
    ok &= report("EMA reaches k-means fixed point", ema_fixed_point);
    ok &= report("straight-through contract", straight_through);
    ok &= report("metric oracles", metric_oracles);
    ok &= report("determinism", determinism);

    let tmp = TempDir::new().expect("temp dir");
    let main_dir = tmp.path().join("sweep");
    let main = sweep(None, &main_dir);
    match &main {
        Ok((s, secs)) => {
            println!("     default sweep, {secs:.0}s: {}", table(s));
            ok &= report("trend runtime under 10 min", || {
                if *secs < 600.0 {
                    Ok(format!("{secs:.0}s"))
                } else {
                    Err(format!("{secs:.0}s"))
                }
            });
            ok &= report("trend (a) probe accuracy", || trend_a(s));
            ok &= report("trend (b) EER", || trend_b(s));
            ok &= report("trend (c) content error", || trend_c(s));
            ok &= report("trend (d) d_sys opposite to EER", || trend_d(s));
        }
        Err(e) => {
            for name in [
                "trend runtime under 10 min",
                "trend (a)",
                "trend (b)",
                "trend (c)",
                "trend (d)",
            ] {
                println!("FAIL {name}: {e}");
            }
            ok = false;
        }
    }
    ok &= report("F0 transforms", || f0_transforms(&main_dir));

    let capacity_plan = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/configs/capacity.toml");
    ok &= report("capacity analog", || {
        let (cap, secs) = sweep(Some(&capacity_plan), &tmp.path().join("capacity"))?;
        println!("     capacity sweep, {secs:.0}s: {}", table(&cap));
        let (main, _) = main.as_ref().map_err(|e| e.clone())?;
        capacity(&cap, main)
    });

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
