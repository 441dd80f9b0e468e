//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line to
//! stderr; the test fails if any criterion fails.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cfaudit_cli::{run_all, Ctx, Effective, Overrides};
use cfaudit_core::corpus::{self, ColumnMapping, Essay, ScreenConfig};
use cfaudit_core::lexicon::{self, Direction, GenderLexicon};
use cfaudit_core::promptgen::{self, Condition, TemplateSet};
use cfaudit_core::report::{self, ConditionFamily, ResultRow};
use cfaudit_core::stats::{self, DistanceMetric, PermutationConfig};
use cfaudit_core::textstats::{self, ResourceLexicons};
use cfaudit_core::tsne::{self, SquareMatrix, TsneConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Exact two-sided p over all (2n)! orderings of the pooled vectors.
fn exhaustive_p(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let pool: Vec<&[f64]> = x.iter().chain(y).map(Vec::as_slice).collect();
    let d = |i: usize, j: usize| stats::cosine_distance(pool[i], pool[j]).unwrap();
    let t_obs = (0..n).map(|i| d(i, n + i)).sum::<f64>() / n as f64;
    let mut stats_all = Vec::new();
    let mut order: Vec<usize> = (0..2 * n).collect();
    permute(&mut order, 0, &mut |o| {
        stats_all.push((0..n).map(|i| d(o[i], o[n + i])).sum::<f64>() / n as f64);
    });
    let mean = stats_all.iter().sum::<f64>() / stats_all.len() as f64;
    let dev = (t_obs - mean).abs();
    let hits = stats_all
        .iter()
        .filter(|t| (*t - mean).abs() >= dev - 1e-12)
        .count();
    hits as f64 / stats_all.len() as f64
}

fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for instance in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + instance);
        let shift = 0.6 * instance as f64 / 9.0;
        let x: Vec<Vec<f64>> = (0..3).map(|_| gaussian(&mut rng, 8)).collect();
        let y: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                gaussian(&mut rng, 8)
                    .into_iter()
                    .map(|v| v + shift)
                    .collect()
            })
            .collect();
        let exact = exhaustive_p(&x, &y);
        let xr: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
        let yr: Vec<&[f64]> = y.iter().map(Vec::as_slice).collect();
        let cfg = PermutationConfig {
            permutations: 5000,
            seed: 77 + instance,
            ..PermutationConfig::default()
        };
        let mc = stats::permutation_test_raw(&xr, &yr, DistanceMetric::Cosine, &cfg)
            .map_err(|e| e.to_string())?;
        let diff = (mc.p_two_tailed - exact).abs();
        ensure(
            diff <= 0.05,
            format!(
                "instance {instance}: exact {exact:.4} vs MC {:.4}",
                mc.p_two_tailed
            ),
        )?;
        worst = worst.max(diff);
    }
    let elapsed = start.elapsed();
    ensure(
        elapsed < Duration::from_secs(10),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!(
        "max |p_mc - p_exact| = {worst:.4} over 10 instances in {elapsed:.2?}"
    ))
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let trials = 200;
    let mut rejections = 0;
    for trial in 0..trials as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(50_000 + trial);
        let x: Vec<Vec<f64>> = (0..50).map(|_| gaussian(&mut rng, 64)).collect();
        let y: Vec<Vec<f64>> = (0..50).map(|_| gaussian(&mut rng, 64)).collect();
        let xr: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
        let yr: Vec<&[f64]> = y.iter().map(Vec::as_slice).collect();
        let cfg = PermutationConfig {
            permutations: 1000,
            seed: trial,
            ..PermutationConfig::default()
        };
        let r = stats::permutation_test_raw(&xr, &yr, DistanceMetric::Cosine, &cfg)
            .map_err(|e| e.to_string())?;
        if r.p_two_tailed < 0.05 {
            rejections += 1;
        }
    }
    let rate = rejections as f64 / trials as f64;
    let elapsed = start.elapsed();
    ensure(
        (0.02..=0.09).contains(&rate),
        format!("rejection rate {rate:.3}"),
    )?;
    ensure(
        elapsed < Duration::from_secs(120),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!(
        "rejection rate {rate:.3} ({rejections}/{trials}) in {elapsed:.2?}"
    ))
}

const SUBJECTS: &[&str] = &[
    "soccer",
    "music",
    "robotics",
    "gardening",
    "chess",
    "painting",
    "history",
    "swimming",
    "coding",
    "cooking",
];
const VERBS: &[&str] = &["practices", "studies", "enjoys", "teaches", "explores"];

fn synthetic_corpus(path: &Path, per_group: usize) {
    let mut out = String::from("essay_id,full_text\n");
    for i in 0..per_group * 2 {
        let (pronoun, noun) = if i % 2 == 0 {
            ("he", "boy")
        } else {
            ("she", "girl")
        };
        let text = format!(
            "The {noun} in my class {verb} {subject} every afternoon. {Pronoun} says that {subject} taught \
             patience, and {pronoun} believes students should choose activities that challenge them. \
             I agree because effort in essay number {i} matters more than talent.",
            verb = VERBS[i % VERBS.len()],
            subject = SUBJECTS[(i / 2) % SUBJECTS.len()],
            Pronoun = if pronoun == "he" { "He" } else { "She" },
        );
        out.push_str(&format!("s{i:03},\"{text}\"\n"));
    }
    std::fs::write(path, out).unwrap();
}

fn mock_run(dir: &Path, mode: &str) -> Result<Vec<ResultRow>, String> {
    let cfg = format!(
        "seed = 2024\nmock = true\nmock_mode = \"{mode}\"\n\n[corpus]\npath = \"corpus.csv\"\n\n\
         [[models]]\nid = \"mock\"\n\n[stats]\nmetrics = [\"cosine\"]\n\n[tsne]\niterations = 300\n"
    );
    let cfg_path = dir.join(format!("{mode}.toml"));
    std::fs::write(&cfg_path, cfg).map_err(|e| e.to_string())?;
    let eff = Effective::load(&cfg_path, &Overrides::default()).map_err(|e| e.to_string())?;
    run_all(&mut Ctx::new(&eff)).map_err(|e| e.to_string())?;
    let csv = std::fs::read_to_string(eff.run_dir().join("report/results.csv"))
        .map_err(|e| e.to_string())?;
    report::results_from_csv(&csv).map_err(|e| e.to_string())
}

fn p_of(rows: &[ResultRow], comparison: &str) -> Result<f64, String> {
    rows.iter()
        .find(|r| r.comparison == comparison)
        .map(|r| r.p)
        .ok_or_else(|| format!("no row for {comparison}"))
}

fn criterion_3() -> Check {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    synthetic_corpus(&tmp.path().join("corpus.csv"), 50);
    let biased = mock_run(tmp.path(), "biased")?;
    let unbiased = mock_run(tmp.path(), "unbiased")?;
    let p_biased = p_of(&biased, "M vs M-F")?;
    ensure(
        p_biased < 0.01,
        format!("biased implicit M vs M-F p = {p_biased}"),
    )?;
    let mut worst_unbiased: f64 = 1.0;
    for c in ["M vs M-F", "M vs F", "M vs N", "F vs N"] {
        let p = p_of(&unbiased, c)?;
        ensure(p > 0.05, format!("unbiased {c} p = {p}"))?;
        worst_unbiased = worst_unbiased.min(p);
    }
    let n = biased
        .iter()
        .find(|r| r.comparison == "M vs M-F")
        .map_or(0, |r| r.n);
    let elapsed = start.elapsed();
    ensure(
        elapsed < Duration::from_secs(120),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!(
        "100 pairs: biased p = {p_biased:.5} (n={n}); unbiased min p = {worst_unbiased:.3}; {elapsed:.2?}"
    ))
}

fn criterion_4() -> Check {
    let cos = stats::cosine_distance(&[1.0, 1.0], &[1.0, 0.0]).map_err(|e| e.to_string())?;
    ensure(
        (cos - (1.0 - 2f64.sqrt() / 2.0)).abs() <= 1e-12,
        format!("cosine {cos}"),
    )?;
    let euc = stats::euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).map_err(|e| e.to_string())?;
    ensure((euc - 5.0).abs() <= 1e-12, format!("euclidean {euc}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let dim = rng.random_range(2..64);
        let unit = |rng: &mut ChaCha8Rng| {
            let v = gaussian(rng, dim);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect::<Vec<_>>()
        };
        let (a, b) = (unit(&mut rng), unit(&mut rng));
        let e = stats::euclidean_distance(&a, &b).map_err(|e| e.to_string())?;
        let c = stats::cosine_distance(&a, &b).map_err(|e| e.to_string())?;
        worst = worst.max((e * e - 2.0 * c).abs());
    }
    ensure(worst <= 1e-9, format!("identity residual {worst:e}"))?;
    Ok(format!(
        "hand values exact; max |euclid^2 - 2 cos| = {worst:.2e} over 1000 unit pairs"
    ))
}

const EXCERPT_M: &str = "All he cares about is Seagoing Cowboys he want to be one. Well maybe if he is one then he might...";
const EXCERPT_MF: &str = "All she cares about is Seagoing Cowgirls she want to be one. Well maybe if she is one then she might...";
const EXCERPT_F: &str = "Imagine a woman is late to work and her hair is a mess, she threw random clothees on, and all her work papers are stored in random places in her briefcase.";
const EXCERPT_FM: &str = "Imagine a man is late to work and his hair is a mess, he threw random clothees on, and all his work papers are stored in random places in his briefcase.";

fn criterion_5() -> Check {
    let lex = GenderLexicon::shipped();
    let mf = lexicon::swap(EXCERPT_M, Direction::MaleToFemale, &lex).output_text;
    ensure(mf == EXCERPT_MF, format!("M2F excerpt gave {mf:?}"))?;
    let fm = lexicon::swap(EXCERPT_F, Direction::FemaleToMale, &lex).output_text;
    ensure(fm == EXCERPT_FM, format!("F2M excerpt gave {fm:?}"))?;

    let ingested = corpus::ingest_essays(fixtures().join("essays.csv"), &ColumnMapping::default())
        .map_err(|e| e.to_string())?;
    let screened = corpus::screen_and_classify(&ingested.essays, &lex, &ScreenConfig::default())
        .map_err(|e| e.to_string())?;
    let pairs = corpus::build_pairs(&screened, &lex).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for pair in &pairs {
        let back = lexicon::swap(&pair.counterfactual_text, pair.direction.reverse(), &lex);
        if pair.substitution_log.ambiguous_count > 0 || back.ambiguous_count > 0 {
            continue;
        }
        ensure(
            back.output_text == pair.source.text,
            format!("round trip changed {}", pair.source.essay_id),
        )?;
        checked += 1;
    }
    ensure(
        checked > 0,
        "no fixture essay was free of ambiguous substitutions",
    )?;
    Ok(format!(
        "both excerpts byte-identical; {checked}/{} unambiguous fixture essays round-trip",
        pairs.len()
    ))
}

fn clusters(seed: u64, per: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..3)
        .flat_map(|c| {
            let center: Vec<f64> = (0..dim)
                .map(|d| if d % 3 == c { 10.0 } else { 0.0 })
                .collect();
            (0..per)
                .map(|_| {
                    center
                        .iter()
                        .map(|m| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            m + 0.5 * z
                        })
                        .collect()
                })
                .collect::<Vec<Vec<f64>>>()
        })
        .collect()
}

fn kl_at(p: &SquareMatrix, y: &[[f64; 2]]) -> f64 {
    tsne::kl_divergence(p, &tsne::low_dim_affinities(y)).unwrap()
}

fn criterion_6() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x: Vec<Vec<f64>> = (0..10).map(|_| gaussian(&mut rng, 5)).collect();
    let xr: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
    let p = tsne::pairwise_affinities(&xr, 3.0).map_err(|e| e.to_string())?;
    let y: Vec<[f64; 2]> = (0..10)
        .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
        .collect();
    let grad = tsne::tsne_gradient(&p, &y).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..10 {
        for d in 0..2 {
            let mut plus = y.clone();
            let mut minus = y.clone();
            plus[i][d] += h;
            minus[i][d] -= h;
            let fd = (kl_at(&p, &plus) - kl_at(&p, &minus)) / (2.0 * h);
            num += (grad[i][d] - fd).powi(2);
            den += fd.powi(2);
        }
    }
    let rel = (num / den).sqrt();
    ensure(rel < 1e-4, format!("gradient relative error {rel:e}"))?;

    let data = clusters(60, 20, 16);
    let dr: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
    let cfg = TsneConfig {
        perplexity: 10.0,
        learning_rate: 50.0,
        seed: 3,
        ..TsneConfig::default()
    };
    let fit = tsne::tsne_fit(&dr, &cfg).map_err(|e| e.to_string())?;
    let post = fit.post_exaggeration(&cfg);
    ensure(post.len() >= 2, "too few post-exaggeration checkpoints")?;
    for w in post.windows(2) {
        ensure(
            w[1].kl <= w[0].kl + 1e-6,
            format!(
                "KL rose from {} to {} at iteration {}",
                w[0].kl, w[1].kl, w[1].iteration
            ),
        )?;
    }
    ensure(
        fit.trustworthiness >= 0.95,
        format!("3-cluster trustworthiness {}", fit.trustworthiness),
    )?;

    let flat: Vec<Vec<f64>> = (0..20).map(|_| gaussian(&mut rng, 2)).collect();
    let fr: Vec<&[f64]> = flat.iter().map(Vec::as_slice).collect();
    let identity = tsne::trustworthiness(&fr, &fr, 5).map_err(|e| e.to_string())?;
    ensure(
        identity == 1.0,
        format!("identity trustworthiness {identity}"),
    )?;
    Ok(format!(
        "gradient rel err {rel:.1e}; KL non-increasing over {} checkpoints (final {:.4}); T(k=5) = {:.4}; identity T = 1",
        post.len(),
        fit.kl_final,
        fit.trustworthiness
    ))
}

fn criterion_7() -> Check {
    let words: HashSet<String> = ["analyse", "data"].iter().map(|s| s.to_string()).collect();
    let norms: HashMap<String, f64> =
        [("apple".to_string(), 5.0), ("idea".to_string(), 1.5)].into();
    let res = ResourceLexicons::with_words(words, norms);

    let academic = textstats::academic_ratio(
        &textstats::tokenize_words("we analyse data"),
        &res.academic_words,
    );
    ensure(academic == 2.0 / 3.0, format!("academic ratio {academic}"))?;
    let conc = textstats::concreteness_mean(
        &textstats::tokenize_words("apple idea"),
        &res.concreteness_norms,
    );
    ensure(
        conc.mean == Some(3.25),
        format!("concreteness {:?}", conc.mean),
    )?;
    let (first, second) =
        textstats::pronoun_rates(&textstats::tokenize_words("I like your essay"), &res);
    ensure(
        first == 25.0 && second == 25.0,
        format!("pronouns {first}/{second}"),
    )?;
    let sentences = textstats::tokenize_sentences("You must avoid this. You could explore that.");
    let s = textstats::supportiveness(
        &sentences,
        &res.patterns.supportive,
        &res.patterns.controlling,
    );
    ensure(
        s.supportive == 1 && s.controlling == 2 && s.score == -0.125,
        format!("supportiveness {s:?}"),
    )?;
    let props = textstats::sentence_type_props(&textstats::tokenize_sentences(
        "It works. Does it work? It works!",
    ));
    let third = 1.0 / 3.0;
    ensure(
        props.declarative == third && props.interrogative == third && props.exclamative == third,
        format!("sentence props {props:?}"),
    )?;
    Ok(
        "academic 2/3, concreteness 3.25, pronouns 25/25, S = -0.125, sentence props 1/3 each"
            .into(),
    )
}

fn criterion_8() -> Check {
    let lex = GenderLexicon::shipped();
    let essays: Vec<Essay> = (0..600)
        .map(|i| Essay {
            essay_id: format!("p{i:03}"),
            text: format!(
                "{} wrote essay {i} about why {} school should start later in the morning for every student.",
                if i % 2 == 0 { "He" } else { "She" },
                if i % 2 == 0 { "his" } else { "her" },
            ),
            prompt_topic: None,
        })
        .collect();
    let screened = corpus::screen_and_classify(
        &essays,
        &lex,
        &ScreenConfig {
            min_tokens: 1,
            ..ScreenConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    ensure(
        screened.group_m.len() == 300 && screened.group_f.len() == 300,
        format!(
            "screened {}+{}",
            screened.group_m.len(),
            screened.group_f.len()
        ),
    )?;
    let pairs = corpus::build_pairs(&screened, &lex).map_err(|e| e.to_string())?;
    let jobs = promptgen::plan_experiment(
        &screened,
        &pairs,
        &["model-a".to_string()],
        &TemplateSet::default(),
    )
    .map_err(|e| e.to_string())?;
    let count = |f: fn(Condition) -> bool| jobs.iter().filter(|j| f(j.condition)).count();
    let implicit = count(|c| {
        matches!(
            c,
            Condition::ImplicitOriginalM
                | Condition::ImplicitOriginalF
                | Condition::ImplicitCounterfactualMF
                | Condition::ImplicitCounterfactualFM
        )
    });
    let explicit = count(Condition::is_explicit);
    let baseline = count(|c| c == Condition::BaselineMPrime);
    ensure(
        (implicit, explicit, baseline) == (1200, 1800, 300),
        format!("{implicit} implicit, {explicit} explicit, {baseline} baseline"),
    )?;
    let ids: HashSet<&str> = jobs.iter().map(|j| j.job_id.as_str()).collect();
    ensure(ids.len() == jobs.len(), "duplicate job ids")?;
    Ok(format!(
        "{implicit} implicit + {explicit} explicit + {baseline} baseline = {} jobs",
        jobs.len()
    ))
}

fn criterion_9() -> Check {
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let o = Overrides {
            run_root: Some(tmp.path().to_path_buf()),
            ..Overrides::default()
        };
        let eff = Effective::load(&fixtures().join("audit.toml"), &o).map_err(|e| e.to_string())?;
        run_all(&mut Ctx::new(&eff)).map_err(|e| e.to_string())?;
        let dir = eff.run_dir();
        let read = |f: &str| std::fs::read(dir.join(f)).map_err(|e| e.to_string());
        outputs.push((read("report/results.csv")?, read("report/textstats.csv")?));
    }
    ensure(
        outputs[0].0 == outputs[1].0,
        "results.csv differs between runs",
    )?;
    ensure(
        outputs[0].1 == outputs[1].1,
        "textstats.csv differs between runs",
    )?;
    let rows =
        report::results_from_csv(std::str::from_utf8(&outputs[0].0).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    ensure(
        rows.iter()
            .any(|r| r.condition == ConditionFamily::Implicit),
        "no implicit rows in report",
    )?;
    Ok(format!(
        "results.csv ({} bytes) and textstats.csv ({} bytes) byte-identical across runs",
        outputs[0].0.len(),
        outputs[0].1.len()
    ))
}

type Criterion = (&'static str, fn() -> Check);

#[test]
fn acceptance() {
    let criteria: [Criterion; 9] = [
        ("permutation oracle equivalence", criterion_1),
        ("null calibration", criterion_2),
        ("injected-bias end-to-end", criterion_3),
        ("metric exactness", criterion_4),
        ("swap fidelity", criterion_5),
        ("t-SNE correctness", criterion_6),
        ("textstats exactness", criterion_7),
        ("plan arithmetic", criterion_8),
        ("reproducibility", criterion_9),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let line = match &outcome {
            Ok(detail) => format!("criterion {} ({name}): PASS - {detail}", i + 1),
            Err(why) => {
                failed.push(i + 1);
                format!("criterion {} ({name}): FAIL - {why}", i + 1)
            }
        };
        writeln!(std::io::stderr(), "{line}").unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
