//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always reach the output.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use serde_json::Value;
use sublora::bounds::{audit, delta_interval, mc_coverage, subsampled_terms, BoundInputs, BoundReport, SyntheticClass};
use sublora::codec::arith::{decode, empirical_entropy, encode, histogram};
use sublora::harness::certify::load_report;
use sublora::harness::experiments::ExperimentsReport;
use sublora::harness::sweep::SweepSummary;
use sublora::model::{log_softmax_f64, Inputs, ModelConfig, Reparam, Transformer, LOG2_E};
use sublora::quantizer::{qat_gradients, QuantizerState};
use sublora::risk::doc_token_stats;
use sublora::rng;
use sublora::sublora::{build_projector, SubLora, SubLoraConfig};

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Check, Duration);

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e<E: std::fmt::Display>(x: E) -> String {
    x.to_string()
}

fn fixture(name: &str) -> Value {
    let p = format!("{}/tests/data/{name}.json", env!("CARGO_MANIFEST_DIR"));
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn desk_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../results/desk")
}

fn coverage() -> Check {
    let trials = 10_000;
    let limit = 0.05 + 3.0 * (0.05f64 * 0.95 / trials as f64).sqrt();
    let mut out = Vec::new();
    for (name, class) in [("singleton", SyntheticClass::singleton(0.3)), ("uniform-1024", SyntheticClass::uniform(10, 0.5))] {
        let r = mc_coverage(&class, trials, 500, 0.05, 17).map_err(e)?;
        ensure(r.trials == trials, "trial count")?;
        ensure(r.rate <= limit, format!("{name}: violation rate {} > {limit:.4}", r.rate))?;
        out.push(format!("{name} {:.4}", r.rate));
    }
    Ok(format!("violation rates {} (limit {limit:.4})", out.join(", ")))
}

fn interval() -> Check {
    let v = 256;
    ensure(delta_interval(1.0, v).map_err(e)?.delta == 0.0, "Δ(1, V) != 0")?;
    let d = delta_interval(0.5, 2).map_err(e)?.delta;
    ensure((d - 3f64.log2()).abs() <= 1e-12, format!("Δ(0.5, 2) = {d}"))?;
    let m = Transformer::new(ModelConfig { n_layers: 1, n_heads: 2, embed_dim: 8, context_length: 16, vocab_size: v, seed: 4 }).map_err(e)?;
    let base = m.init_params::<f64>().values;
    let mut r = rng::stream(21, "interval");
    for t in 0..1000 {
        let scale = [0.0, 0.3, 3.0, 30.0][t % 4];
        let theta: Vec<f64> = base.iter().map(|x| x + scale * (r.random::<f64>() - 0.5)).collect();
        let doc: Vec<u8> = (0..r.random_range(1..48)).map(|_| r.random()).collect();
        let alpha = if t % 50 == 0 { 1.0 } else { 10f64.powf(-4.0 * r.random::<f64>()) };
        let bpd = doc_token_stats(&m, &theta, &doc, 5).map_err(e)?.smoothed_bpd(alpha, v).map_err(e)?;
        let i = delta_interval(alpha, v).map_err(e)?;
        let slack = 1e-12 * i.upper.abs();
        ensure(bpd >= i.lower - slack && bpd <= i.upper + slack, format!("triple {t}: {bpd} outside [{}, {}]", i.lower, i.upper))?;
    }
    Ok("1000 triples inside [log2(V/α) − Δ, log2(V/α)]; Δ(1, V) = 0; Δ(0.5, 2) = log2 3".into())
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

fn arithmetic() -> Check {
    let data = fixture("bounds");
    let rows = data["subsampled"].as_array().unwrap();
    let mut worst: f64 = 0.0;
    for row in rows {
        let f = |k: &str| row[k].as_f64().unwrap();
        let inp = BoundInputs {
            risk: f("risk"),
            delta: f("delta"),
            prior_nats: f("prior_nats"),
            m: row["m"].as_u64().unwrap(),
            n: row["n"].as_u64().unwrap(),
            confidence: f("confidence"),
        };
        let t = subsampled_terms(&inp).map_err(e)?;
        for (got, k) in [(t.complexity, "complexity"), (t.subsampling, "subsampling"), (t.total, "total")] {
            ensure(rel_close(got, f(k), 1e-10), format!("{k}: {got} vs {}", f(k)))?;
            worst = worst.max((got - f(k)).abs() / f(k).abs().max(1.0));
        }
    }
    let huge = subsampled_terms(&BoundInputs { risk: 1.0, delta: 3.0, prior_nats: 10.0, m: 1000, n: 1_000_000_000_000, confidence: 0.05 })
        .map_err(e)?;
    ensure(huge.subsampling < 1e-5 * 3.0, format!("third term {} at n = 1e12", huge.subsampling))?;
    Ok(format!("{} tuples, worst relative error {worst:.1e}; third term {:.2e} at n = 1e12", rows.len(), huge.subsampling))
}

fn projector() -> Check {
    let mut worst: f64 = 0.0;
    let grid = [(1_000, 100), (10_000, 1_000), (100_000, 2_500), (250_000, 3_000), (1_000_000, 4_096), (1_000_000, 1)];
    for (d_lora, d) in grid {
        let p = build_projector(d_lora, d, 7).map_err(e)?;
        // PᵀP = (Q1ᵀQ1) ⊗ (Q2ᵀQ2), so its entries are products of the two Gram entries.
        let (q1, q2) = p.factors();
        let g1 = gram(q1, p.big1, p.d1);
        let g2 = gram(q2, p.big2, p.d2);
        let mut err: f64 = 0.0;
        for (ij, &a) in g1.iter().enumerate() {
            for (kl, &b) in g2.iter().enumerate() {
                let eye = (ij % (p.d1 + 1) == 0 && kl % (p.d2 + 1) == 0) as u8 as f64;
                err = err.max((a * b - eye).abs());
            }
        }
        ensure(err <= 1e-6, format!("D_lora {d_lora}, d {d}: max |PᵀP − I| = {err:.2e}"))?;
        worst = worst.max(err);
    }
    let mut dense_err: f64 = 0.0;
    for (d_lora, d) in [(4_000, 60), (1_000, 7), (777, 30), (4_096, 64)] {
        let p = build_projector(d_lora, d, 3).map_err(e)?;
        ensure(p.padded_dim() <= 4096, "padded dimension too large for the dense check")?;
        let cols: Vec<Vec<f64>> = (0..d).map(|j| p.padded_column(j)).collect();
        let w: Vec<f64> = (0..d).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        for (row, &f) in p.project(&w).map_err(e)?.iter().enumerate() {
            let slow: f64 = (0..d).map(|j| cols[j][row] * w[j]).sum();
            dense_err = dense_err.max((slow - f).abs());
        }
    }
    ensure(dense_err <= 1e-10, format!("dense Kronecker mismatch {dense_err:.2e}"))?;
    Ok(format!("max |PᵀP − I| = {worst:.1e} over {} builds; dense mismatch {dense_err:.1e}", grid.len()))
}

fn gram(q: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut g = vec![0.0; cols * cols];
    for r in 0..rows {
        let row = &q[r * cols..(r + 1) * cols];
        for i in 0..cols {
            for j in 0..cols {
                g[i * cols + j] += row[i] * row[j];
            }
        }
    }
    g
}

fn fd_rel(fd: f64, g: f64, gnorm: f64) -> f64 {
    (fd - g).abs() / fd.abs().max(g.abs()).max(1e-3 * gnorm)
}

fn gradients() -> Check {
    let m = Transformer::new(ModelConfig { n_layers: 2, n_heads: 2, embed_dim: 8, context_length: 12, vocab_size: 256, seed: 11 }).map_err(e)?;
    ensure(m.num_params() <= 10_000, format!("{} parameters", m.num_params()))?;
    let h = 1e-5;
    let mut r = rng::stream(3, "gradients");
    let d1: Vec<u8> = (0..10).map(|_| r.random_range(32..120)).collect();
    let d2: Vec<u8> = (0..7).map(|_| r.random_range(32..120)).collect();
    let docs: [&[u8]; 2] = [&d1, &d2];

    let sub: SubLora<f64> = SubLora::new(&m, SubLoraConfig { intrinsic_dim: 60, rank: 2, lora_alpha: 4.0, seed: 5 }).map_err(e)?;
    let w: Vec<f64> = (0..60).map(|_| r.random::<f64>() - 0.5).collect();
    let (_, g) = m.loss_and_grad(&sub, &w, &docs).map_err(e)?;
    let gnorm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut worst_w: f64 = 0.0;
    for i in 0..w.len() {
        let (mut wp, mut wm) = (w.clone(), w.clone());
        wp[i] += h;
        wm[i] -= h;
        let lp = m.loss(&sub.materialize(&wp).map_err(e)?, &docs).map_err(e)?;
        let lm = m.loss(&sub.materialize(&wm).map_err(e)?, &docs).map_err(e)?;
        worst_w = worst_w.max(fd_rel((lp - lm) / (2.0 * h), g[i], gnorm));
    }
    ensure(worst_w <= 1e-4, format!("weight gradient error {worst_w:.2e}"))?;

    let state = QuantizerState::init(&w, 5, 0.0, 3).map_err(e)?;
    let qg = qat_gradients(&m, &sub, &state, &docs).map_err(e)?;
    let cnorm = qg.grad_levels.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut worst_c: f64 = 0.0;
    for k in 0..state.num_levels() {
        let at = |dh: f64| -> std::result::Result<f64, String> {
            let mut s = state.clone();
            s.levels[k] += dh;
            m.loss(&sub.materialize(&s.dequantize()).map_err(e)?, &docs).map_err(e)
        };
        let fd = (at(h)? - at(-h)?) / (2.0 * h);
        worst_c = worst_c.max(fd_rel(fd, qg.grad_levels[k], cnorm));
    }
    ensure(worst_c <= 1e-3, format!("level gradient error {worst_c:.2e}"))?;
    Ok(format!("{} params; weights {worst_w:.1e}, levels {worst_c:.1e}", m.num_params()))
}

fn codec() -> Check {
    let mut r = rng::stream(5, "codec");
    for t in 0..1000 {
        let alphabet = r.random_range(1..=64usize);
        let len = r.random_range(0..2000usize);
        // Skewed source: weight of symbol j falls off geometrically at a random rate.
        let decay: f64 = r.random::<f64>() * 2.0;
        let weights: Vec<f64> = (0..alphabet).map(|j| (-decay * j as f64).exp()).collect();
        let total: f64 = weights.iter().sum();
        let symbols: Vec<u32> = (0..len)
            .map(|_| {
                let mut u = r.random::<f64>() * total;
                weights.iter().position(|&w| {
                    u -= w;
                    u < 0.0
                }).unwrap_or(alphabet - 1) as u32
            })
            .collect();
        let (bits, counts) = encode(&symbols, alphabet).map_err(e)?;
        ensure(decode(&bits, &counts, len).map_err(e)? == symbols, format!("stream {t} did not round-trip"))?;
    }
    let n = 100_000;
    let mut worst_slack = f64::INFINITY;
    for seed in 0..3u64 {
        let mut s = rng::stream(seed, "entropy");
        let symbols: Vec<u32> = (0..n).map(|_| (s.random::<u64>().trailing_zeros()).min(11)).collect();
        let (bits, counts) = encode(&symbols, 12).map_err(e)?;
        ensure(counts == histogram(&symbols, 12).map_err(e)?, "counts differ from the histogram")?;
        let budget = n as f64 * empirical_entropy(&counts) + 2.0 + 32.0;
        ensure(bits.bit_len as f64 <= budget, format!("{} bits over budget {budget:.1}", bits.bit_len))?;
        worst_slack = worst_slack.min(budget - bits.bit_len as f64);
    }
    Ok(format!("1000 round-trips; n = 1e5 payload at least {worst_slack:.1} bits under nH + 34"))
}

/// Log-probability of every position, each from its own forward pass.
fn naive_log2p(m: &Transformer, theta: &[f64], d: &[u8], stride: usize) -> Vec<f64> {
    let l = m.cfg.context_length;
    let v = m.cfg.vocab_size;
    (1..=d.len())
        .map(|i| {
            let ctx: Vec<u32> = if i <= l {
                std::iter::once(m.cfg.bos()).chain(d[..i - 1].iter().map(|&t| t as u32)).collect()
            } else {
                let lp = l - ((l as i64 - i as i64).rem_euclid(stride as i64)) as usize;
                d[i - 1 - lp..i - 1].iter().map(|&t| t as u32).collect()
            };
            let cache = m.forward(theta, &Inputs::new(std::slice::from_ref(&ctx))).unwrap();
            let mut row = vec![0.0; v];
            log_softmax_f64(&cache.logits[(ctx.len() - 1) * v..ctx.len() * v], &mut row);
            row[d[i - 1] as usize] * LOG2_E
        })
        .collect()
}

fn windowing() -> Check {
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for (l, strides) in [(8usize, vec![1usize, 3, 8]), (12, vec![5, 12])] {
        let m = Transformer::new(ModelConfig { n_layers: 1, n_heads: 2, embed_dim: 8, context_length: l, vocab_size: 16, seed: 2 }).map_err(e)?;
        let mut r = rng::stream(l as u64, "windowing");
        let theta: Vec<f64> = m.init_params::<f64>().values.iter().map(|x| x + r.random::<f64>() - 0.5).collect();
        for stride in strides {
            for n in [1, l - 1, l, l + 1, 2 * l + 3, 4 * l] {
                let doc: Vec<u8> = (0..n).map(|_| r.random_range(0..16)).collect();
                let fast = doc_token_stats(&m, &theta, &doc, stride).map_err(e)?;
                for (a, b) in fast.log2p.iter().zip(naive_log2p(&m, &theta, &doc, stride)) {
                    worst = worst.max((a - b).abs());
                }
                cases += 1;
            }
        }
    }
    ensure(worst <= 1e-9, format!("windowed vs naive {worst:.2e}"))?;
    Ok(format!("{cases} documents up to 4L, max difference {worst:.1e}"))
}

fn desk_certificate() -> Check {
    let dir = desk_dir();
    let best = dir.join("best.report.json");
    ensure(best.exists(), format!("no committed desk result at {}", best.display()))?;
    let mut audited = 0;
    for sub in ["certs", "experiments"] {
        let Ok(entries) = std::fs::read_dir(dir.join(sub)) else { continue };
        for p in entries.filter_map(|x| x.ok()).map(|x| x.path()) {
            if p.to_string_lossy().ends_with(".report.json") {
                audit(&load_report(&p).map_err(e)?).map_err(|x| format!("{}: {x}", p.display()))?;
                audited += 1;
            }
        }
    }
    let report: BoundReport = load_report(&best).map_err(e)?;
    audit(&report).map_err(e)?;
    let bpd = report.bpd().ok_or("best report has no BPD certificate")?;
    let uniform = report.alpha_table.iter().find(|r| r.alpha == 1.0).ok_or("α = 1 missing from the grid")?;
    ensure(uniform.bound == 8.0, format!("α = 1 row certifies {}", uniform.bound))?;
    ensure(bpd.bound < 8.0, format!("best BPD bound {} is vacuous", bpd.bound))?;
    Ok(format!(
        "BPD bound {:.4} (target ≤ 7: {}), m = {}, C(h) = {} bits, {audited} reports audited, α = 1 row = 8.0",
        bpd.bound,
        if bpd.bound <= 7.0 { "met" } else { "missed" },
        report.inputs.m,
        report.inputs.size.total_bits,
    ))
}

fn qualitative() -> Check {
    let dir = desk_dir();
    let read = |name: &str| std::fs::read_to_string(dir.join(name)).map_err(|x| format!("{name}: {x}"));
    let sweep: SweepSummary = serde_json::from_str(&read("sweep.json")?).map_err(e)?;
    ensure(sweep.c_h_monotone_in_d != Some(false), "C(h) not increasing in d")?;
    let mut notes = vec![
        format!("interior α* {:?}", sweep.interior_alpha),
        format!("C(h) increasing in d {:?}", sweep.c_h_monotone_in_d),
    ];
    if let Ok(text) = read("experiments.json") {
        let x: ExperimentsReport = serde_json::from_str(&text).map_err(e)?;
        if let Some(p) = x.permutation {
            notes.push(format!("permuted ≥ clean {} ({:.3} vs {:.3})", p.permuted_not_better, p.permuted_bpd_bound, p.clean_bpd_bound));
        }
        if let Some(s) = x.sequence_level {
            notes.push(format!("sequence within 10% {} ({:.3})", s.within_ten_percent, s.relative_difference));
        }
    } else {
        notes.push("no experiments.json".into());
    }
    Ok(notes.join("; "))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("bound coverage", coverage, Duration::from_secs(300)),
        ("interval", interval, Duration::from_secs(60)),
        ("subsampling arithmetic", arithmetic, Duration::from_secs(60)),
        ("projector orthogonality", projector, Duration::from_secs(120)),
        ("gradients", gradients, Duration::from_secs(300)),
        ("codec", codec, Duration::from_secs(60)),
        ("windowing", windowing, Duration::from_secs(120)),
        ("desk certificate", desk_certificate, Duration::from_secs(60)),
        ("qualitative shape (reported)", qualitative, Duration::from_secs(60)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check, budget) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let took = t.elapsed();
        let outcome = outcome.and_then(|msg| {
            if took <= budget {
                Ok(msg)
            } else {
                Err(format!("{msg}; took {took:.1?}, budget {budget:?}"))
            }
        });
        match outcome {
            Ok(msg) => println!("PASS {name}: {msg} [{took:.1?}]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name}: {msg} [{took:.1?}]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
