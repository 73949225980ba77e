//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! a summary; exits nonzero on failure only when
//! `SHADOWOPT_ACCEPTANCE_STRICT=1`.

use std::ops::ControlFlow;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use shadowopt_core::diagnostics::VerdictLabel;
use shadowopt_core::lrp::{relevance, TargetHead, LRP_EPSILON};
use shadowopt_core::model::{
    ChannelStats, Dataset, DatasetRequest, ExecutionRecord, NormStats, ParameterVector, ProgramTemplate, CHANNELS,
    FORCE_CHANNEL,
};
use shadowopt_core::net::{train, HeadGradient, Mode, NetArchitecture, Prediction, ShadowModel, TrainHyperparams, TrainInit};
use shadowopt_core::quality::{analyze, QualityThresholds};
use shadowopt_core::scenario::{demo_spec, run_scenario, DiagnosticsScenario, DEMO_SEED};
use shadowopt_core::sim::{batch_execute, gearbox_template, ParamRanges, Sampling, SimConfig};
use shadowopt_service::demo::{demo_dataset_request, demo_hyperparams, demo_optimizer_hyperparams, demo_records, report, simulated_objectives, DemoReport};
use shadowopt_service::dto::{DatasetInfo, LrpResponse, ModelDocument, OptimizationDocument};
use shadowopt_service::{http, App};
use tower::ServiceExt;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Suite {
    results: Vec<(String, bool)>,
}

impl Suite {
    fn run(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        if let Ok(only) = std::env::var("SHADOWOPT_ACCEPTANCE_ONLY") {
            if !name.starts_with(&only) {
                return;
            }
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {name}: {} [{:.1} s]", result.detail, start.elapsed().as_secs_f64());
        self.results.push((name.into(), result.pass));
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_net(seed: u64, bias_scale: f64, shifted: bool) -> ShadowModel {
    let mut r = rng(seed);
    let template = gearbox_template();
    let hidden: Vec<usize> = (0..r.random_range(1..=3)).map(|_| r.random_range(2..=7)).collect();
    let pad = r.random_range(2..=5);
    let stat = |r: &mut ChaCha8Rng| ChannelStats {
        mean: if shifted { r.random_range(-3.0..3.0) } else { 0.0 },
        std: r.random_range(0.5..2.0),
    };
    let stats = NormStats {
        parameters: template.parameter_specs.iter().map(|_| stat(&mut r)).collect(),
        trajectory: (0..pad * CHANNELS).map(|_| stat(&mut r)).collect(),
        cycle_time: stat(&mut r),
    };
    let arch = NetArchitecture::new(template.dim(), hidden, 0.0, pad);
    let mut m = ShadowModel::random(&template, arch, stats, seed, bias_scale).unwrap();
    m.training_log.train_loss = vec![1.0];
    m
}

fn random_x(r: &mut ChaCha8Rng, template: &ProgramTemplate) -> ParameterVector {
    template
        .parameter_specs
        .iter()
        .map(|s| (s.name.clone(), s.from_unit(r.random_range(0.05..0.95))))
        .collect()
}

fn unit_input(model: &ShadowModel, x: &ParameterVector) -> Vec<f64> {
    model.parameter_specs.iter().map(|s| (x.0[&s.name] - s.lower_bound) / (s.upper_bound - s.lower_bound)).collect()
}

// Gradient correctness

struct LinearLoss {
    traj: Vec<f64>,
    cycle_time: f64,
    logit: f64,
}

impl LinearLoss {
    fn value(&self, p: &Prediction) -> f64 {
        let mut v = self.cycle_time * p.cycle_time + self.logit * p.success_logit;
        for (t, s) in p.trajectory.samples.iter().enumerate() {
            for c in 0..3 {
                v += self.traj[t * CHANNELS + c] * s.p[c];
            }
            v += self.traj[t * CHANNELS + FORCE_CHANNEL] * s.f;
        }
        v
    }
}

fn gradient_check() -> Outcome {
    const H: f64 = 1e-5;
    let close = |a: f64, n: f64| {
        let d = (a - n).abs();
        d <= 1e-7 || d <= 1e-4 * a.abs().max(n.abs())
    };
    let start = Instant::now();
    let (mut checked, mut bad) = (0usize, Vec::new());
    for seed in 0..20u64 {
        let model = random_net(seed, 0.5, true);
        let x = random_x(&mut rng(seed + 200), &model.template());
        let mut r = rng(seed + 300);
        let loss = LinearLoss {
            traj: (0..model.architecture.trajectory_dim()).map(|_| r.random_range(-1.0..1.0)).collect(),
            cycle_time: r.random_range(-1.0..1.0),
            logit: r.random_range(-1.0..1.0),
        };
        let eval = |m: &ShadowModel, x: &ParameterVector| loss.value(&m.predict(x).unwrap());
        let (_, cache) = model.forward(&x, Mode::Eval).unwrap();
        let upstream = HeadGradient { trajectory: loss.traj.clone(), cycle_time: loss.cycle_time, success_logit: loss.logit };
        let g = model.backward(&x, &cache, &upstream).unwrap();
        for (k, s) in model.parameter_specs.iter().enumerate() {
            let (mut plus, mut minus) = (x.clone(), x.clone());
            plus.set(&s.name, x.0[&s.name] + H);
            minus.set(&s.name, x.0[&s.name] - H);
            let fd = (eval(&model, &plus) - eval(&model, &minus)) / (2.0 * H);
            checked += 1;
            if !close(g.input[k], fd) {
                bad.push(format!("net {seed} d/d{}", s.name));
            }
        }
        for (l, layer) in model.layers.iter().enumerate() {
            for ((j, i), _) in layer.weights.indexed_iter() {
                let mut m = model.clone();
                m.layers[l].weights[[j, i]] += H;
                let up = eval(&m, &x);
                m.layers[l].weights[[j, i]] -= 2.0 * H;
                let fd = (up - eval(&m, &x)) / (2.0 * H);
                checked += 1;
                if !close(g.layers[l].weights[[j, i]], fd) {
                    bad.push(format!("net {seed} W{l}[{j},{i}]"));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        bad.is_empty() && secs < 10.0,
        format!("20 nets, {checked} components, {} mismatches {:?}, {secs:.2} s (limit 10 s)", bad.len(), bad.iter().take(3).collect::<Vec<_>>()),
    )
}

// LRP

fn signed(z: f64) -> f64 {
    z + LRP_EPSILON * if z >= 0.0 { 1.0 } else { -1.0 }
}

/// Epsilon-rule relevances recomputed from the raw weights.
fn lrp_oracle(model: &ShadowModel, x: &ParameterVector, head: TargetHead) -> (Vec<f64>, f64) {
    let mut acts = vec![unit_input(model, x)];
    let last = model.layers.len() - 1;
    for layer in &model.layers[..last] {
        let a = acts.last().unwrap();
        let next = (0..layer.bias.len())
            .map(|j| (layer.bias[j] + (0..a.len()).map(|i| layer.weights[[j, i]] * a[i]).sum::<f64>()).tanh())
            .collect();
        acts.push(next);
    }
    let arch = &model.architecture;
    let st = &model.norm_stats;
    let rows: Vec<(usize, f64, f64)> = match head {
        TargetHead::PeakForce => (0..arch.pad_length)
            .map(|t| t * CHANNELS + FORCE_CHANNEL)
            .map(|j| (j, st.trajectory[j].scale(), st.trajectory[j].mean))
            .collect(),
        TargetHead::CycleTime => vec![(arch.cycle_time_index(), st.cycle_time.scale(), st.cycle_time.mean)],
        TargetHead::SuccessLogit => vec![(arch.logit_index(), 1.0, 0.0)],
    };
    let out = &model.layers[last];
    let a = acts.last().unwrap();
    let values: Vec<f64> = rows
        .iter()
        .map(|&(j, s, m)| m + s * (out.bias[j] + (0..a.len()).map(|i| out.weights[[j, i]] * a[i]).sum::<f64>()))
        .collect();
    let (value, seeds) = if head == TargetHead::PeakForce {
        let m = values.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        (lse, values.iter().map(|v| (v - lse).exp() * lse).collect::<Vec<_>>())
    } else {
        (values[0], vec![values[0]])
    };
    let mut r = vec![0.0; a.len()];
    for (k, &(j, s, _)) in rows.iter().enumerate() {
        for i in 0..a.len() {
            r[i] += a[i] * s * out.weights[[j, i]] * seeds[k] / signed(values[k]);
        }
    }
    for l in (0..last).rev() {
        let layer = &model.layers[l];
        let a = &acts[l];
        let mut lower = vec![0.0; a.len()];
        for j in 0..r.len() {
            let z = layer.bias[j] + (0..a.len()).map(|i| layer.weights[[j, i]] * a[i]).sum::<f64>();
            for i in 0..a.len() {
                lower[i] += a[i] * layer.weights[[j, i]] * r[j] / signed(z);
            }
        }
        r = lower;
    }
    (r, value)
}

fn lrp_oracle_match() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let model = random_net(seed, 0.5, true);
        let x = random_x(&mut rng(seed + 1), &model.template());
        for head in TargetHead::ALL {
            let rep = relevance(&model, &x, head).unwrap();
            let (want, value) = lrp_oracle(&model, &x, head);
            worst = worst.max((rep.output_value - value).abs());
            for (got, w) in rep.relevances.values().zip(&want) {
                worst = worst.max((got - w).abs() / w.abs().max(1.0));
            }
        }
    }
    outcome(worst <= 1e-8, format!("50 nets x 3 heads, max deviation {worst:.2e} (limit 1e-8)"))
}

fn lrp_zero_bias() -> Outcome {
    let (mut total, mut within, mut worst) = (0, 0, 0.0f64);
    for seed in 0..200u64 {
        let model = random_net(seed, 0.0, false);
        let x = random_x(&mut rng(seed ^ 0x5a), &model.template());
        for head in TargetHead::ALL {
            let rep = relevance(&model, &x, head).unwrap();
            total += 1;
            within += (rep.conservation_residual <= 1e-6) as usize;
            worst = worst.max(rep.conservation_residual);
        }
    }
    outcome(
        within == total,
        format!("epsilon {LRP_EPSILON:e}: {within}/{total} head evaluations within 1e-6, worst residual {worst:.2e}"),
    )
}

fn lrp_trained(demo: &DemoReport) -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for h in &demo.relevance {
        let ratio = h.conservation_residual / h.output_value.abs();
        pass &= ratio <= 0.05;
        parts.push(format!("{:?} residual {:.3} / |output| {:.3} = {:.1}%", h.target_head, h.conservation_residual, h.output_value.abs(), 100.0 * ratio));
    }
    outcome(pass, format!("demo model: {} (limit 5%)", parts.join(", ")))
}

// Surrogate fidelity

fn fidelity() -> Outcome {
    let start = Instant::now();
    let records = batch_execute(500, &Sampling::UniformRandom, &ParamRanges::full(), &SimConfig::default(), 7).unwrap();
    let template = gearbox_template();
    let request = DatasetRequest { id: "fidelity".into(), name: "fidelity".into(), ..Default::default() };
    let dataset = Dataset::from_records(&request, &template, records).unwrap();
    let hp = TrainHyperparams::default();
    let model = train("fidelity", &dataset, &template, &hp, TrainInit::Scratch, |_| ControlFlow::Continue(())).unwrap();
    let m = model.training_log.metrics.clone().unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        m.success_accuracy >= 0.85 && m.traj_rmse <= 2.0 && secs < 120.0,
        format!(
            "500 records seed 7, held-out success_accuracy {:.3} (min 0.85), position RMSE {:.3} mm (max 2.0), {secs:.1} s (limit 120 s)",
            m.success_accuracy, m.traj_rmse
        ),
    )
}

// Optimization against brute force

fn optimization_vs_grid(demo: &DemoReport, demo_secs: f64) -> Outcome {
    let start = Instant::now();
    let template = gearbox_template();
    let spec = demo_spec();
    let levels: Vec<Vec<f64>> = template
        .parameter_specs
        .iter()
        .map(|s| (0..15).map(|k| s.lower_bound + (s.upper_bound - s.lower_bound) * k as f64 / 14.0).collect())
        .collect();
    let mut best = f64::INFINITY;
    let mut idx = [0usize; 4];
    loop {
        let x = template.vector(&[levels[0][idx[0]], levels[1][idx[1]], levels[2][idx[2]], levels[3][idx[3]]]);
        best = best.min(simulated_objectives(&x, &spec).unwrap().total);
        let mut d = 0;
        while d < 4 {
            idx[d] += 1;
            if idx[d] < 15 {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
        if d == 4 {
            break;
        }
    }
    let grid_secs = start.elapsed().as_secs_f64();
    let got = demo.simulated_best.total;
    let init = demo.simulated_init.total;
    let gap = (got - best) / best.abs();
    let improvement = 1.0 - got / init;
    outcome(
        gap <= 0.10 && improvement >= 0.20 && grid_secs + demo_secs < 120.0,
        format!(
            "simulated total at x_best {got:.4}, grid minimum {best:.4} (gap {:.1}%, max 10%), improvement over x_init {:.1}% (min 20%), grid {grid_secs:.1} s + demo {demo_secs:.1} s (limit 120 s)",
            100.0 * gap,
            100.0 * improvement
        ),
    )
}

// Diagnostics

fn diagnostics() -> Outcome {
    let expected = [
        (DiagnosticsScenario::Baseline, VerdictLabel::GoodPerformance),
        (DiagnosticsScenario::TinyDataLargeNet, VerdictLabel::Overfitting),
        (DiagnosticsScenario::SingleUnit, VerdictLabel::Underfitting),
        (DiagnosticsScenario::HeavyDropout, VerdictLabel::Regularization),
        (DiagnosticsScenario::ShuffledLabels, VerdictLabel::ErroneousTrainingData),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (scenario, label) in expected {
        let hits = (0..10).filter(|&rep| run_scenario(scenario, rep).map(|v| v.label == label).unwrap_or(false)).count();
        pass &= hits >= 8;
        parts.push(format!("{} {hits}/10", scenario.name()));
    }
    outcome(pass, format!("{} (min 8/10 each)", parts.join(", ")))
}

// Data quality

fn quality_records(n: usize, ranges: &ParamRanges, seed: u64) -> Vec<ExecutionRecord> {
    batch_execute(n, &Sampling::UniformRandom, ranges, &SimConfig { dt: 0.05, ..Default::default() }, seed).unwrap()
}

fn quality_dataset(records: Vec<ExecutionRecord>) -> Dataset {
    let req = DatasetRequest { id: "q".into(), name: "q".into(), ..Default::default() };
    Dataset::from_records(&req, &gearbox_template(), records).unwrap()
}

fn type7_fences(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| {
        let h = (v.len() - 1) as f64 * p;
        let k = h.floor() as usize;
        if k + 1 >= v.len() { v[v.len() - 1] } else { v[k] + (h - k as f64) * (v[k + 1] - v[k]) }
    };
    let (q1, q3) = (q(0.25), q(0.75));
    (q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1))
}

fn data_quality() -> Outcome {
    let template = gearbox_template();
    let th = QualityThresholds::default();

    let constant = ParamRanges([("search_velocity".to_string(), [20.0, 20.0])].into_iter().collect());
    let q = analyze(&quality_dataset(quality_records(80, &constant, 1)), &template, &th).unwrap();
    let constant_ok = q.per_parameter.iter().all(|p| p.sufficient == (p.name != "search_velocity")) && !q.overall_ok;

    let q = analyze(&quality_dataset(quality_records(200, &ParamRanges::full(), 2)), &template, &th).unwrap();
    let full_ok = q.per_parameter.iter().all(|p| p.sufficient);

    let mut recs = quality_records(100, &ParamRanges::full(), 3);
    let t = &mut recs[37].trajectory;
    let peak = t.peak_force();
    let k = t.samples.iter().position(|s| s.f == peak).unwrap();
    t.samples[k].f = 10.0 * peak;
    let q = analyze(&quality_dataset(recs), &template, &th).unwrap();
    let spike_ok = q.outlier_indices.contains(&37);

    let mut fence_ok = 0;
    let mut r = rng(11);
    for i in 0..100u64 {
        let n = r.random_range(5..60);
        let d = quality_dataset(quality_records(n, &ParamRanges::full(), 1000 + i));
        let q = analyze(&d, &template, &th).unwrap();
        let forces: Vec<f64> = d.records.iter().map(|r| r.trajectory.peak_force()).collect();
        let paths: Vec<f64> = d.records.iter().map(|r| r.trajectory.path_length()).collect();
        let (fl, fh) = type7_fences(&forces);
        let (pl, ph) = type7_fences(&paths);
        let near = |a: f64, b: f64| (a - b).abs() <= 1e-9 * b.abs().max(1.0);
        let expected: Vec<usize> =
            (0..n).filter(|&i| forces[i] < fl || forces[i] > fh || paths[i] < pl || paths[i] > ph).collect();
        let ok = near(q.peak_force.lower_fence, fl)
            && near(q.peak_force.upper_fence, fh)
            && near(q.path_length.lower_fence, pl)
            && near(q.path_length.upper_fence, ph)
            && q.outlier_indices == expected;
        fence_ok += ok as usize;
    }
    outcome(
        constant_ok && full_ok && spike_ok && fence_ok == 100,
        format!(
            "constant parameter insufficient {constant_ok}, full-range sufficient {full_ok}, 10x spike flagged {spike_ok}, fences match on {fence_ok}/100 datasets"
        ),
    )
}

// LRP plausibility

fn plausibility(demo: &DemoReport) -> Outcome {
    let head = demo.relevance.iter().find(|h| h.target_head == TargetHead::PeakForce).unwrap();
    let top = head
        .bars
        .iter()
        .max_by(|a, b| a.relevance.abs().total_cmp(&b.relevance.abs()))
        .unwrap();
    let all: Vec<String> = head.bars.iter().map(|b| format!("{} {:.3}", b.parameter, b.relevance)).collect();
    outcome(top.parameter == "approach_velocity", format!("peak_force relevances at the dataset mean: {}", all.join(", ")))
}

// Workflow integration

fn cli_demo(seed: u64) -> (DemoReport, Value, f64) {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_shadowopt"))
        .arg("--data-dir")
        .arg(dir.path())
        .args(["demo", "--seed", &seed.to_string()])
        .output()
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert!(out.status.success(), "demo exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr));
    let value: Value = serde_json::from_slice(&out.stdout).unwrap();
    (serde_json::from_value(value.clone()).unwrap(), value, secs)
}

struct Http {
    app: Arc<App>,
    schema_errors: Vec<String>,
    responses: usize,
}

impl Http {
    async fn call(&mut self, method: &str, uri: &str, body: Option<String>, schema: &str, want: StatusCode) -> Value {
        let mut req = Request::builder().method(method).uri(uri);
        if body.is_some() {
            req = req.header("content-type", "application/json");
        }
        let req = req.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
        let resp = http::router(self.app.clone()).oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value: Value = serde_json::from_slice(&bytes)
            .unwrap_or_else(|e| panic!("{method} {uri} returned {status} with a non-JSON body ({e}): {}", String::from_utf8_lossy(&bytes)));
        assert_eq!(status, want, "{method} {uri}: {value}");
        self.check(schema, &value, uri);
        value
    }

    fn check(&mut self, schema: &str, value: &Value, at: &str) {
        let schema = serde_json::to_value(&shadowopt_service::schemas::all()[schema]).unwrap();
        let validator = jsonschema::validator_for(&schema).unwrap();
        self.responses += 1;
        for e in validator.iter_errors(value) {
            self.schema_errors.push(format!("{at}: {e} at {}", e.instance_path));
        }
    }

    async fn post(&mut self, uri: &str, body: Value, schema: &str, want: StatusCode) -> Value {
        self.call("POST", uri, Some(body.to_string()), schema, want).await
    }

    async fn get(&mut self, uri: &str, schema: &str) -> Value {
        self.call("GET", uri, None, schema, StatusCode::OK).await
    }

    async fn job(&mut self, id: &str) -> String {
        loop {
            let job = self.get(&format!("/jobs/{id}"), "job").await;
            match job["state"].as_str().unwrap() {
                "done" => return job["result_id"].as_str().unwrap().to_string(),
                "failed" | "cancelled" => panic!("job {id} ended: {job}"),
                _ => tokio::time::sleep(Duration::from_millis(50)).await,
            }
        }
    }
}

fn typed<T: DeserializeOwned>(v: &Value) -> T {
    serde_json::from_value(v.clone()).unwrap()
}

async fn http_demo(seed: u64) -> (DemoReport, Vec<String>, usize) {
    let dir = tempfile::tempdir().unwrap();
    let app = Arc::new(App::open(dir.path(), QualityThresholds::default()).unwrap());
    let mut c = Http { app, schema_errors: Vec::new(), responses: 0 };
    c.get("/capabilities", "capabilities").await;
    let session = c.post("/sessions", json!({}), "session", StatusCode::CREATED).await;
    let sid = session["id"].as_str().unwrap().to_string();

    let body: String = demo_records(seed).unwrap().iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    c.call("POST", "/executions", Some(body), "ingest_result", StatusCode::CREATED).await;
    let dataset = c.post("/datasets", serde_json::to_value(demo_dataset_request(seed)).unwrap(), "dataset", StatusCode::CREATED).await;
    let did = dataset["id"].as_str().unwrap().to_string();
    c.get(&format!("/datasets/{did}/quality"), "quality_report").await;
    c.get(&format!("/datasets/{did}/summary"), "distribution_summary").await;

    let train = json!({
        "name": format!("demo-{seed}"),
        "dataset_id": did,
        "hyperparams": demo_hyperparams(seed),
    });
    let job = c.post("/models", train, "job", StatusCode::ACCEPTED).await;
    let mid = c.job(job["id"].as_str().unwrap()).await;
    let model = c.get(&format!("/models/{mid}"), "model").await;
    c.get(&format!("/models/{mid}/diagnostics"), "diagnostics").await;
    let lrp = c.post(&format!("/models/{mid}/lrp"), json!({}), "lrp", StatusCode::OK).await;

    let optimize = json!({
        "model_id": mid,
        "spec": demo_spec(),
        "hyperparams": demo_optimizer_hyperparams(seed),
    });
    let job = c.post("/optimizations", optimize, "job", StatusCode::ACCEPTED).await;
    let rid = c.job(job["id"].as_str().unwrap()).await;
    let run = c.get(&format!("/optimizations/{rid}"), "optimization").await;
    c.post("/whatif", json!({"model_id": mid, "x": run["run"]["x_best"], "spec": demo_spec()}), "what_if", StatusCode::OK).await;
    c.post(&format!("/sessions/{sid}/step"), json!({"step": "training", "dataset_id": did}), "session", StatusCode::OK).await;
    c.post(&format!("/sessions/{sid}/step"), json!({"step": "optimization", "model_id": mid}), "session", StatusCode::OK).await;
    c.post(&format!("/sessions/{sid}/step"), json!({"step": "optimization", "run_id": rid}), "session", StatusCode::OK).await;

    let dataset: DatasetInfo = typed(&dataset);
    let model: ModelDocument = typed(&model);
    let lrp: LrpResponse = typed(&lrp);
    let run: OptimizationDocument = typed(&run);
    let rep = report(&dataset, &model, lrp.bars, &run).unwrap();
    (rep, c.schema_errors, c.responses)
}

fn workflow(cli: &DemoReport, cli_json: &Value, cli_secs: f64) -> Outcome {
    let start = Instant::now();
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let (http, mut schema_errors, responses) = rt.block_on(http_demo(DEMO_SEED));
    let http_secs = start.elapsed().as_secs_f64();
    let schema = serde_json::to_value(&shadowopt_service::schemas::all()["demo_report"]).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    schema_errors.extend(validator.iter_errors(cli_json).map(|e| format!("cli demo: {e}")));
    let same_x = cli.x_best == http.x_best && cli.x_init == http.x_init;
    let same_objectives = cli.predicted_best == http.predicted_best
        && cli.predicted_init == http.predicted_init
        && cli.simulated_best == http.simulated_best
        && cli.simulated_init == http.simulated_init;
    let total = cli_secs + http_secs;
    outcome(
        same_x && same_objectives && schema_errors.is_empty() && total < 300.0,
        format!(
            "x_best identical {same_x}, objectives identical {same_objectives}, {} schema violations over {} documents {:?}, cli {cli_secs:.1} s + http {http_secs:.1} s (limit 300 s)",
            schema_errors.len(),
            responses + 1,
            schema_errors.iter().take(2).collect::<Vec<_>>()
        ),
    )
}

fn main() {
    std::panic::set_hook(Box::new(|_| {}));
    let mut suite = Suite { results: Vec::new() };
    let demo = catch_unwind(|| cli_demo(DEMO_SEED));
    if let Err(e) = &demo {
        println!("demo run failed: {:?}", e.downcast_ref::<String>());
    }

    suite.run("gradient_correctness", gradient_check);
    suite.run("lrp_conservation.zero_bias", lrp_zero_bias);
    match &demo {
        Ok((rep, _, _)) => suite.run("lrp_conservation.trained", || lrp_trained(rep)),
        Err(_) => suite.run("lrp_conservation.trained", || outcome(false, "demo failed")),
    }
    suite.run("lrp_conservation.oracle", lrp_oracle_match);
    suite.run("surrogate_fidelity", fidelity);
    match &demo {
        Ok((rep, _, secs)) => suite.run("optimization_vs_brute_force", || optimization_vs_grid(rep, *secs)),
        Err(_) => suite.run("optimization_vs_brute_force", || outcome(false, "demo failed")),
    }
    suite.run("diagnostics_scenarios", diagnostics);
    suite.run("data_quality_rules", data_quality);
    match &demo {
        Ok((rep, _, _)) => suite.run("lrp_plausibility", || plausibility(rep)),
        Err(_) => suite.run("lrp_plausibility", || outcome(false, "demo failed")),
    }
    match &demo {
        Ok((rep, json, secs)) => suite.run("workflow_integration", || workflow(rep, json, *secs)),
        Err(_) => suite.run("workflow_integration", || outcome(false, "demo failed")),
    }

    let passed = suite.results.iter().filter(|(_, p)| *p).count();
    let failed: Vec<&str> = suite.results.iter().filter(|(_, p)| !p).map(|(n, _)| n.as_str()).collect();
    println!("{passed}/{} acceptance criteria passed", suite.results.len());
    if !failed.is_empty() {
        println!("failing: {}", failed.join(", "));
        if std::env::var("SHADOWOPT_ACCEPTANCE_STRICT").as_deref() == Ok("1") {
            std::process::exit(1);
        }
    }
}
