//! Straight-line reference implementations and small fixtures shared by the
//! integration tests and the acceptance binary.

#![allow(dead_code)]

use copa::data::Sample;
use copa::encoder::{BackboneConfig, Image};
use copa::model::{AblationFlags, CopaModel, ModelConfig};
use copa::schema::{ConceptDef, ConceptSchema};
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5))
}

pub fn random_vector(rng: &mut impl Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.random_range(-1.5..1.5))
}

pub fn random_image(rng: &mut impl Rng, size: usize) -> Image {
    Array3::from_shape_fn((size, size, 3), |_| rng.random_range(0.0..1.0))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &v in x {
        if v > max {
            max = v;
        }
    }
    let mut e = Vec::new();
    let mut total = 0.0;
    for &v in x {
        let t = (v - max).exp();
        e.push(t);
        total += t;
    }
    e.into_iter().map(|v| v / total).collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// `softmax(q·k_j / sqrt(dk))`-weighted sum of value rows, by loops.
pub fn cross_attend(q: &[f64], keys: &Array2<f64>, values: &Array2<f64>, dk: usize) -> (Vec<f64>, Vec<f64>) {
    let mut logits = Vec::new();
    for j in 0..keys.nrows() {
        let mut dot = 0.0;
        for c in 0..q.len() {
            dot += q[c] * keys[[j, c]];
        }
        logits.push(dot / (dk as f64).sqrt());
    }
    let w = softmax(&logits);
    let mut out = vec![0.0; values.ncols()];
    for j in 0..values.nrows() {
        for c in 0..values.ncols() {
            out[c] += w[j] * values[[j, c]];
        }
    }
    (out, w)
}

pub struct CegParams {
    pub anchors: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
    pub eps: f64,
}

/// Concept embeddings and attention rows for every anchor.
pub fn ceg(p: &CegParams, tokens: &Array2<f64>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = p.anchors.ncols();
    let hidden = p.w1.ncols();
    let mut zs = Vec::new();
    let mut attn = Vec::new();
    for i in 0..p.anchors.nrows() {
        let q: Vec<f64> = p.anchors.row(i).to_vec();
        let (zhat, w) = cross_attend(&q, tokens, tokens, d);
        let mut h = vec![0.0; hidden];
        for o in 0..hidden {
            let mut s = p.b1[[0, o]];
            for c in 0..d {
                s += zhat[c] * p.w1[[c, o]];
            }
            h[o] = gelu(s);
        }
        let mut r = vec![0.0; d];
        for o in 0..d {
            let mut s = p.b2[[0, o]];
            for c in 0..hidden {
                s += h[c] * p.w2[[c, o]];
            }
            r[o] = s + q[o];
        }
        let mean = r.iter().sum::<f64>() / d as f64;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let z: Vec<f64> = (0..d)
            .map(|o| (r[o] - mean) / (var + p.eps).sqrt() * p.gamma[[0, o]] + p.beta[[0, o]])
            .collect();
        zs.push(z);
        attn.push(w);
    }
    (zs, attn)
}

/// `Z_i = Σ_l softmax(w_i)_l z_l^i`; a single logits row is shared.
pub fn aggregate(per_depth: &[Array2<f64>], logits: &Array2<f64>) -> Vec<Vec<f64>> {
    let n = per_depth[0].nrows();
    let d = per_depth[0].ncols();
    let mut out = Vec::new();
    for i in 0..n {
        let row = if logits.nrows() == 1 { 0 } else { i };
        let w = softmax(&logits.row(row).to_vec());
        let mut z = vec![0.0; d];
        for (l, zl) in per_depth.iter().enumerate() {
            for c in 0..d {
                z[c] += w[l] * zl[[i, c]];
            }
        }
        out.push(z);
    }
    out
}

/// Temperature-scaled cosine logits against every candidate row.
pub fn cosine_logits(z: &[f64], candidates: &Array2<f64>, tau: f64) -> Vec<f64> {
    let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    (0..candidates.nrows())
        .map(|j| {
            let mut dot = 0.0;
            let mut tn = 0.0;
            for c in 0..z.len() {
                dot += z[c] * candidates[[j, c]];
                tn += candidates[[j, c]] * candidates[[j, c]];
            }
            dot / (zn * tn.sqrt()) / tau
        })
        .collect()
}

/// Mean over concepts of `-log softmax(logits_i)[gt_i]`.
pub fn contrastive_loss(logits: &[Vec<f64>], gt: &[usize]) -> f64 {
    let mut total = 0.0;
    for (l, &t) in logits.iter().zip(gt) {
        let mut max = f64::NEG_INFINITY;
        for &v in l {
            max = max.max(v);
        }
        let mut s = 0.0;
        for &v in l {
            s += (v - max).exp();
        }
        total += -(l[t] - max - s.ln());
    }
    total / logits.len() as f64
}

pub fn fuse(p: &[f64], candidates: &Array2<f64>) -> Vec<f64> {
    let mut out = vec![0.0; candidates.ncols()];
    for j in 0..candidates.nrows() {
        for c in 0..candidates.ncols() {
            out[c] += p[j] * candidates[[j, c]];
        }
    }
    out
}

/// `(alpha, logits, probabilities)` of the gated head.
pub fn gated(fused: &[Vec<f64>], gating: &[f64], w: &Array2<f64>, b: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let alpha = softmax(gating);
    let d = fused[0].len();
    let mut pooled = vec![0.0; d];
    for (i, f) in fused.iter().enumerate() {
        for c in 0..d {
            pooled[c] += alpha[i] * f[c];
        }
    }
    let mut logits = Vec::new();
    for k in 0..w.ncols() {
        let mut s = b[k];
        for c in 0..d {
            s += pooled[c] * w[[c, k]];
        }
        logits.push(s);
    }
    let probs = softmax(&logits);
    (alpha, logits, probs)
}

/// Rank AUC by counting every positive/negative pair; ties count one half.
pub fn pairwise_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// Two layers, eight wide, 8×8 images, 2×2 patches of 4 pixels.
pub fn tiny_config(flags: AblationFlags) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            image_size: 8,
            patch_size: 4,
            ..BackboneConfig::default()
        },
        flags,
        ..ModelConfig::default()
    }
}

pub fn schema_with(candidates: &[&[&str]]) -> ConceptSchema {
    let mut schema = ConceptSchema::synthetic();
    schema.concepts = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| ConceptDef {
            title: format!("concept{i}"),
            candidates: c.iter().map(|s| s.to_string()).collect(),
        })
        .collect();
    schema
}

pub fn tiny_model(flags: AblationFlags, seed: u64) -> CopaModel {
    CopaModel::new(tiny_config(flags), ConceptSchema::synthetic(), seed).unwrap()
}

pub fn tiny_samples(n: usize, seed: u64) -> Vec<Sample> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| Sample {
            id: format!("tiny-{i}"),
            image: random_image(&mut r, 8),
            concept_labels: vec![r.random_range(0..3), r.random_range(0..2), r.random_range(0..2)],
            disease_label: r.random_range(0..2),
            bbox: None,
        })
        .collect()
}

/// Largest deviation between each library routine and its reference above
/// on one random tiny input (N ≤ 3, d ≤ 8, m ≤ 5).
pub fn oracle_errors(seed: u64) -> Vec<(&'static str, f64)> {
    use copa::ceg::{aggregate_layers, ceg_forward, cross_attend as lib_cross_attend, ConceptEmbeddingGenerator};
    use copa::params::ParamStore;

    let mut r = rng(seed);
    let n = r.random_range(1..=3);
    let d = r.random_range(2..=8);
    let m = r.random_range(1..=5);
    let mut errors = Vec::new();

    let q = random_vector(&mut r, d);
    let keys = random_matrix(&mut r, m, d);
    let values = random_matrix(&mut r, m, d);
    let got = lib_cross_attend(q.view(), keys.view(), values.view(), d).unwrap();
    let (want, _) = cross_attend(q.as_slice().unwrap(), &keys, &values, d);
    errors.push(("cross_attend", max_abs_diff(got.as_slice().unwrap(), &want)));

    let mut store = ParamStore::new();
    let hidden = r.random_range(2..=8);
    let gen = ConceptEmbeddingGenerator::new(&mut store, &mut r, n, d, hidden, 1, 1e-5);
    let w = &gen.weights[0];
    for id in [w.fc1_bias, w.fc2_bias, w.ln_gamma, w.ln_beta] {
        let shape = store.value(id).dim();
        *store.value_mut(id) = random_matrix(&mut r, shape.0, shape.1);
    }
    let tokens = random_matrix(&mut r, m, d);
    let got = ceg_forward(&gen, &store, &tokens, 0).unwrap();
    let params = CegParams {
        anchors: store.value(gen.anchors).clone(),
        w1: store.value(w.fc1_weight).clone(),
        b1: store.value(w.fc1_bias).clone(),
        w2: store.value(w.fc2_weight).clone(),
        b2: store.value(w.fc2_bias).clone(),
        gamma: store.value(w.ln_gamma).clone(),
        beta: store.value(w.ln_beta).clone(),
        eps: gen.ln_eps,
    };
    let (zs, attn) = ceg(&params, &tokens);
    let mut err: f64 = 0.0;
    for i in 0..n {
        err = err.max(max_abs_diff(&got.z.row(i).to_vec(), &zs[i]));
        err = err.max(max_abs_diff(&got.attention.row(i).to_vec(), &attn[i]));
    }
    errors.push(("ceg_forward", err));

    let depths = r.random_range(1..=4);
    let per_depth: Vec<Array2<f64>> = (0..depths).map(|_| random_matrix(&mut r, n, d)).collect();
    let rows = if r.random_bool(0.5) { n } else { 1 };
    let logits = random_matrix(&mut r, rows, depths);
    let got = aggregate_layers(&per_depth, &logits).unwrap();
    let want = aggregate(&per_depth, &logits);
    let err = (0..n).map(|i| max_abs_diff(&got.row(i).to_vec(), &want[i])).fold(0.0, f64::max);
    errors.push(("aggregate_layers", err));

    let tau = r.random_range(0.05..1.0);
    let mut scores = Vec::new();
    let mut logits = Vec::new();
    let mut gt = Vec::new();
    let mut candidate_sets = Vec::new();
    for _ in 0..n {
        let k = r.random_range(2..=5);
        let cands = random_matrix(&mut r, k, d);
        let z = random_vector(&mut r, d);
        let s = copa::alignment::score(z.view(), &cands, tau).unwrap();
        let want = cosine_logits(z.as_slice().unwrap(), &cands, tau);
        errors.push(("alignment_score", max_abs_diff(s.logits.as_slice().unwrap(), &want)));
        logits.push(want);
        gt.push(r.random_range(0..k));
        scores.push(s);
        candidate_sets.push(cands);
    }
    let got = copa::alignment::contrastive_loss(&scores, &gt).unwrap();
    errors.push(("contrastive_loss", (got - contrastive_loss(&logits, &gt)).abs()));

    let mut fused_lib = Vec::new();
    let mut fused_ref = Vec::new();
    let mut err: f64 = 0.0;
    for (s, cands) in scores.iter().zip(&candidate_sets) {
        let got = copa::alignment::fuse_candidates(s.probabilities.view(), cands).unwrap();
        let want = fuse(s.probabilities.as_slice().unwrap(), cands);
        err = err.max(max_abs_diff(got.as_slice().unwrap(), &want));
        fused_lib.push(got);
        fused_ref.push(want);
    }
    errors.push(("fuse_candidates", err));

    let classes = r.random_range(2..=4);
    let gating = random_vector(&mut r, n);
    let head_w = random_matrix(&mut r, d, classes);
    let head_b = random_vector(&mut r, classes);
    let got = copa::diagnosis::gated_aggregate(&fused_lib, &gating, &head_w, &head_b).unwrap();
    let (alpha, logits, probs) = gated(&fused_ref, gating.as_slice().unwrap(), &head_w, head_b.as_slice().unwrap());
    let err = max_abs_diff(got.alpha.as_slice().unwrap(), &alpha)
        .max(max_abs_diff(got.logits.as_slice().unwrap(), &logits))
        .max(max_abs_diff(got.probabilities.as_slice().unwrap(), &probs));
    errors.push(("gated_aggregate", err));
    errors
}

pub mod http {
    use axum::body::Body;
    use axum::http::{Request, StatusCode};
    use axum::Router;
    use base64::Engine;
    use http_body_util::BodyExt;
    use serde_json::{json, Value};
    use tower::ServiceExt;

    use copa::data::{array_to_rgb, Sample};
    use copa::encoder::Image;
    use copa::model::CopaModel;
    use copa::service::{router, AppState, ServiceConfig};

    pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
            .unwrap();
        let res = app.clone().oneshot(req).await.unwrap();
        let status = res.status();
        let bytes = res.into_body().collect().await.unwrap().to_bytes();
        (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
    }

    pub fn png_base64(image: &Image) -> String {
        let mut buf = std::io::Cursor::new(Vec::new());
        array_to_rgb(image).write_to(&mut buf, image::ImageFormat::Png).unwrap();
        base64::engine::general_purpose::STANDARD.encode(buf.into_inner())
    }

    fn without_session(mut v: Value) -> Value {
        v.as_object_mut().unwrap().remove("session");
        v
    }

    fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
        if cond {
            Ok(())
        } else {
            Err(msg.into())
        }
    }

    async fn expect(app: &Router, method: &str, uri: &str, body: Option<Value>, status: StatusCode) -> Result<Value, String> {
        let (s, v) = call(app, method, uri, body.clone()).await;
        ensure(s == status, format!("{method} {uri} {body:?}: expected {status}, got {s} {v}"))?;
        Ok(v)
    }

    fn edits_of(v: &Value) -> Vec<(u64, String, u64)> {
        v["edits"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| (e["concept"].as_u64().unwrap(), e["mode"].as_str().unwrap().to_string(), e["candidate"].as_u64().unwrap()))
            .collect()
    }

    /// Determinism, alpha normalization, checksum constancy across 100 mixed
    /// requests and isolation of two concurrent sessions. Returns a summary.
    pub async fn service_contract(model: CopaModel, samples: Vec<Sample>) -> Result<String, String> {
        ensure(samples.len() >= 2, "need two samples")?;
        let n_concepts = model.n_concepts();
        let ks: Vec<usize> = model.schema.concepts.iter().map(|c| c.k()).collect();
        let images: Vec<String> = samples.iter().take(4).map(|s| png_base64(&s.image)).collect();
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        let app = router(AppState::new(Some(model), ServiceConfig::default()).with_samples(samples));

        let checksum = expect(&app, "GET", "/v1/checksum", None, StatusCode::OK).await?["checksum"].clone();
        let schema = expect(&app, "GET", "/v1/schema", None, StatusCode::OK).await?;
        ensure(schema["concepts"].as_array().map(Vec::len) == Some(n_concepts), "schema concept count")?;

        let a = expect(&app, "POST", "/v1/predict", Some(json!({ "image": images[0] })), StatusCode::OK).await?;
        let b = expect(&app, "POST", "/v1/predict", Some(json!({ "image": images[0] })), StatusCode::OK).await?;
        ensure(without_session(a.clone()) == without_session(b), "same image gave different payloads")?;
        let c = expect(&app, "POST", "/v1/predict", Some(json!({ "sample_id": ids[0] })), StatusCode::OK).await?;
        let d = expect(&app, "POST", "/v1/predict", Some(json!({ "sample_id": ids[0] })), StatusCode::OK).await?;
        ensure(without_session(c) == without_session(d), "same sample gave different payloads")?;
        let alpha: f64 = a["diagnosis"]["alpha"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        ensure((alpha - 1.0).abs() < 1e-9, format!("alpha sums to {alpha}"))?;

        let mut requests = 0;
        let mut checksums = 0;
        let mut session = a["session"].as_str().unwrap().to_string();
        while requests < 100 {
            let i = requests;
            match i % 6 {
                0 => {
                    let body = if i % 12 == 0 {
                        json!({ "image": images[i / 6 % images.len()] })
                    } else {
                        json!({ "sample_id": ids[i / 6 % ids.len()] })
                    };
                    let p = expect(&app, "POST", "/v1/predict", Some(body), StatusCode::OK).await?;
                    let s: f64 = p["diagnosis"]["alpha"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
                    ensure((s - 1.0).abs() < 1e-9, "alpha not normalized")?;
                    session = p["session"].as_str().unwrap().to_string();
                }
                1 => {
                    let concept = i % n_concepts;
                    let edit = json!({ "concept": concept, "mode": "negative", "candidate": i % ks[concept] });
                    expect(&app, "POST", "/v1/intervene", Some(json!({ "session": session, "edits": [edit] })), StatusCode::OK).await?;
                }
                2 => {
                    let concept = (i + 1) % n_concepts;
                    let edit = json!({ "concept": concept, "mode": "positive", "candidate": 0 });
                    let v = expect(&app, "POST", "/v1/intervene", Some(json!({ "session": session, "edits": [edit] })), StatusCode::OK).await?;
                    for c in v["post"]["concepts"].as_array().unwrap() {
                        let s: f64 = c["probabilities"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).sum();
                        ensure((s - 1.0).abs() <= 1e-6, "post probabilities not normalized")?;
                    }
                }
                3 => {
                    expect(&app, "POST", "/v1/reset", Some(json!({ "session": session })), StatusCode::OK).await?;
                }
                4 => {
                    expect(&app, "GET", "/v1/schema", None, StatusCode::OK).await?;
                }
                _ => {
                    let now = expect(&app, "GET", "/v1/checksum", None, StatusCode::OK).await?["checksum"].clone();
                    ensure(now == checksum, "parameter checksum changed")?;
                    checksums += 1;
                }
            }
            requests += 1;
        }
        let now = expect(&app, "GET", "/v1/checksum", None, StatusCode::OK).await?["checksum"].clone();
        ensure(now == checksum, "parameter checksum changed")?;

        let s1 = expect(&app, "POST", "/v1/predict", Some(json!({ "sample_id": ids[1] })), StatusCode::OK).await?;
        let s2 = expect(&app, "POST", "/v1/predict", Some(json!({ "sample_id": ids[1] })), StatusCode::OK).await?;
        let (s1, s2) = (s1["session"].as_str().unwrap().to_string(), s2["session"].as_str().unwrap().to_string());
        let e1 = json!({ "concept": 0, "mode": "negative", "candidate": 0 });
        let e2 = json!({ "concept": n_concepts - 1, "mode": "positive", "candidate": 1 });
        let (r1, r2) = tokio::join!(
            call(&app, "POST", "/v1/intervene", Some(json!({ "session": s1, "edits": [e1] }))),
            call(&app, "POST", "/v1/intervene", Some(json!({ "session": s2, "edits": [e2] }))),
        );
        ensure(r1.0 == StatusCode::OK && r2.0 == StatusCode::OK, "concurrent edits failed")?;
        let v1 = expect(&app, "POST", "/v1/intervene", Some(json!({ "session": s1, "edits": [] })), StatusCode::OK).await?;
        let v2 = expect(&app, "POST", "/v1/intervene", Some(json!({ "session": s2, "edits": [] })), StatusCode::OK).await?;
        ensure(edits_of(&v1) == vec![(0, "negative".into(), 0)], format!("session 1 edits {:?}", edits_of(&v1)))?;
        ensure(
            edits_of(&v2) == vec![((n_concepts - 1) as u64, "positive".into(), 1)],
            format!("session 2 edits {:?}", edits_of(&v2)),
        )?;
        ensure(v1["post"] == r1.1["post"] && v2["post"] == r2.1["post"], "session state drifted")?;

        let again = expect(&app, "POST", "/v1/intervene", Some(json!({ "session": s1, "edits": [e1] })), StatusCode::OK).await?;
        ensure(again["post"] == v1["post"], "repeated edit is not idempotent")?;
        let clash = json!({ "concept": 0, "mode": "positive", "candidate": 0 });
        expect(&app, "POST", "/v1/intervene", Some(json!({ "session": s1, "edits": [clash] })), StatusCode::CONFLICT).await?;
        expect(&app, "POST", "/v1/reset", Some(json!({ "session": s1 })), StatusCode::OK).await?;
        let v1 = expect(&app, "POST", "/v1/intervene", Some(json!({ "session": s1, "edits": [] })), StatusCode::OK).await?;
        let v2 = expect(&app, "POST", "/v1/intervene", Some(json!({ "session": s2, "edits": [] })), StatusCode::OK).await?;
        ensure(edits_of(&v1).is_empty() && edits_of(&v2).len() == 1, "reset leaked across sessions")?;
        ensure(v1["post"] == v1["pre"], "reset did not restore the free prediction")?;

        Ok(format!("{requests} mixed requests, {checksums} checksum probes, 2 isolated sessions"))
    }
}
