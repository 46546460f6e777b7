//! Synthetic token stores with a known relevance structure.
//!
//! Every identity has a base token matrix: a few distinctive instance tokens
//! plus background tokens shared by all identities of the same terrain family.
//! A view rotates every base token by exactly `sigma_deg` in a random
//! direction and replaces an `occlusion` fraction of tokens with clutter drawn
//! from a shared vocabulary. Global pooling sees mostly family background and
//! clutter; token matching can still find the instance tokens.

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::manifest::{ManifestEntry, RelevanceManifest, Role};
use crate::par;
use crate::rng;
use crate::store::TokenSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub identities: usize,
    pub gallery_views: usize,
    pub query_views: usize,
    /// Rotation applied to every token of a view, in degrees.
    pub sigma_deg: f64,
    /// Gallery-only images of unrelated identities.
    pub distractors: usize,
    pub n_tokens: usize,
    pub dim: usize,
    pub instance_tokens: usize,
    pub families: usize,
    /// Distinct texture tokens repeated across a family background.
    pub background_modes: usize,
    /// Size of the shared vocabulary that backgrounds and clutter draw from.
    pub vocab: usize,
    /// Fraction of tokens per view replaced by clutter.
    pub occlusion: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            identities: 500,
            gallery_views: 2,
            query_views: 5,
            sigma_deg: 15.0,
            distractors: 5000,
            n_tokens: 64,
            dim: 64,
            instance_tokens: 20,
            families: 25,
            background_modes: 4,
            vocab: 16,
            occlusion: 0.25,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("synth: {m}")));
        if self.identities + self.distractors == 0 {
            return bad("need at least one identity or distractor".into());
        }
        if self.identities > 0 && (self.gallery_views == 0 || self.query_views == 0) {
            return bad("gallery_views and query_views must be ≥ 1".into());
        }
        if self.dim < 2 || self.n_tokens == 0 || self.n_tokens > u16::MAX as usize {
            return bad(format!("unsupported shape N={} D={}", self.n_tokens, self.dim));
        }
        if self.instance_tokens > self.n_tokens {
            return bad("instance_tokens exceeds n_tokens".into());
        }
        if self.families == 0 || self.vocab == 0 || self.background_modes == 0 {
            return bad("families, background_modes and vocab must be ≥ 1".into());
        }
        if !(0.0..=180.0).contains(&self.sigma_deg) {
            return bad(format!("sigma_deg {} outside [0, 180]", self.sigma_deg));
        }
        if !(0.0..=1.0).contains(&self.occlusion) {
            return bad(format!("occlusion {} outside [0, 1]", self.occlusion));
        }
        Ok(())
    }

    pub fn gallery_size(&self) -> usize {
        self.identities * self.gallery_views + self.distractors
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    /// Gallery views, then query views, then distractors.
    pub token_sets: Vec<TokenSet>,
    pub manifest: RelevanceManifest,
}

impl SynthDataset {
    pub fn split(&self) -> (Vec<&TokenSet>, Vec<&TokenSet>) {
        self.token_sets
            .iter()
            .partition(|t| self.manifest.role(&t.image_id) == Some(Role::Gallery))
    }
}

fn unit_vec(r: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let mut v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(r)).collect();
        if linalg::normalize(&mut v) > 1e-3 {
            return v;
        }
    }
}

/// Rotate unit `t` by exactly `theta` radians toward a random orthogonal direction.
fn rotate(t: &[f32], theta: f64, r: &mut ChaCha8Rng) -> Vec<f32> {
    if theta == 0.0 {
        return t.to_vec();
    }
    let u = loop {
        let mut u = unit_vec(r, t.len());
        let d = linalg::dot(&u, t);
        linalg::add_scaled(&mut u, t, -d);
        if linalg::normalize(&mut u) > 1e-3 {
            break u;
        }
    };
    let (s, c) = theta.sin_cos();
    let mut out: Vec<f32> = t
        .iter()
        .zip(&u)
        .map(|(&a, &b)| (c * a as f64 + s * b as f64) as f32)
        .collect();
    linalg::normalize(&mut out);
    out
}

struct Base {
    tokens: Vec<Vec<f32>>,
    instance: Vec<bool>,
}

fn family_background(spec: &SynthSpec, vocab: &[Vec<f32>], family: usize) -> Vec<Vec<f32>> {
    let mut r = rng::rng(rng::image_seed(spec.seed, &format!("family:{family}")));
    let modes: Vec<usize> = (0..spec.background_modes).map(|_| r.random_range(0..vocab.len())).collect();
    (0..spec.n_tokens - spec.instance_tokens)
        .map(|i| vocab[modes[i % modes.len()]].clone())
        .collect()
}

fn identity_base(spec: &SynthSpec, backgrounds: &[Vec<Vec<f32>>], name: &str) -> Base {
    let mut r = rng::rng(rng::image_seed(spec.seed, name));
    let family = r.random_range(0..backgrounds.len());
    let mut tokens: Vec<Vec<f32>> = (0..spec.instance_tokens).map(|_| unit_vec(&mut r, spec.dim)).collect();
    tokens.extend(backgrounds[family].iter().cloned());
    let mut instance = vec![true; spec.instance_tokens];
    instance.resize(spec.n_tokens, false);
    Base { tokens, instance }
}

fn render_view(spec: &SynthSpec, vocab: &[Vec<f32>], base: &Base, image_id: &str) -> Result<TokenSet> {
    let mut r = rng::rng(rng::image_seed(spec.seed, image_id));
    let n = spec.n_tokens;
    let theta = spec.sigma_deg.to_radians();
    let n_occ = (spec.occlusion * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let occluded = &order[..n_occ];

    let mut rows = Vec::with_capacity(n * spec.dim);
    let mut attn = Vec::with_capacity(n);
    for i in 0..n {
        let (src, weight) = if occluded.contains(&i) {
            (&vocab[r.random_range(0..vocab.len())], 0.5)
        } else if base.instance[i] {
            (&base.tokens[i], 3.0)
        } else {
            (&base.tokens[i], 1.0)
        };
        rows.extend(rotate(src, theta, &mut r));
        attn.push(weight * (1.0 + 0.2 * r.random::<f32>()));
    }
    // Token order carries no meaning.
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut r);
    let d = spec.dim;
    let tokens: Vec<f32> = perm.iter().flat_map(|&p| rows[p * d..(p + 1) * d].iter().copied()).collect();
    let total: f32 = attn.iter().sum();
    let attention: Vec<f32> = perm.iter().map(|&p| attn[p] / total).collect();
    let mut cls = vec![0.0f32; d];
    for (row, &a) in tokens.chunks_exact(d).zip(&attention) {
        linalg::add_scaled(&mut cls, row, a);
    }
    linalg::normalize(&mut cls);
    TokenSet::new(image_id, d, tokens)?.with_attention(attention)?.with_cls(cls)
}

/// Deterministic for a given spec, independent of thread count.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut vr = rng::rng(rng::stage_seed(spec.seed, "vocab"));
    let vocab: Vec<Vec<f32>> = (0..spec.vocab).map(|_| unit_vec(&mut vr, spec.dim)).collect();
    let backgrounds: Vec<Vec<Vec<f32>>> = (0..spec.families).map(|f| family_background(spec, &vocab, f)).collect();

    struct Job {
        image_id: String,
        base_name: String,
        role: Role,
        crater: String,
        view: usize,
    }
    let mut jobs = Vec::new();
    for (role, views) in [(Role::Gallery, spec.gallery_views), (Role::Query, spec.query_views)] {
        let tag = if role == Role::Gallery { "g" } else { "q" };
        for i in 0..spec.identities {
            for v in 0..views {
                jobs.push(Job {
                    image_id: format!("id{i:05}_{tag}{v}"),
                    base_name: format!("identity:{i}"),
                    role,
                    crater: format!("c{i:05}"),
                    view: v,
                });
            }
        }
    }
    for j in 0..spec.distractors {
        jobs.push(Job {
            image_id: format!("dis{j:05}"),
            base_name: format!("distractor:{j}"),
            role: Role::Gallery,
            crater: format!("d{j:05}"),
            view: 0,
        });
    }

    let token_sets = par::try_map(&jobs, |job| {
        let base = identity_base(spec, &backgrounds, &job.base_name);
        render_view(spec, &vocab, &base, &job.image_id)
    })?;
    let manifest = RelevanceManifest::from_entries(jobs.iter().map(|j| ManifestEntry {
        image_id: j.image_id.clone(),
        role: j.role,
        crater_ids: [j.crater.clone()].into(),
        view: Some(j.view.to_string()),
        context: None,
    }))?;
    Ok(SynthDataset { token_sets, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::late_interaction_score;

    fn small() -> SynthSpec {
        SynthSpec {
            identities: 6,
            query_views: 2,
            distractors: 4,
            n_tokens: 16,
            dim: 16,
            instance_tokens: 4,
            families: 2,
            vocab: 16,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn shape_and_manifest() {
        let d = generate(&small()).unwrap();
        assert_eq!(d.token_sets.len(), 6 * 2 + 6 * 2 + 4);
        let (g, q) = d.split();
        assert_eq!(g.len(), small().gallery_size());
        assert_eq!(q.len(), 12);
        assert_eq!(d.manifest.relevant_set("id00003_q1").unwrap().len(), 2);
        for ts in &d.token_sets {
            assert_eq!((ts.n_tokens(), ts.dim()), (16, 16));
            let s: f32 = ts.attention().unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!(ts.cls().is_some());
        }
    }

    #[test]
    fn rotation_angle_is_exact() {
        let mut r = rng::rng(3);
        for _ in 0..50 {
            let t = unit_vec(&mut r, 32);
            let v = rotate(&t, 15f64.to_radians(), &mut r);
            let angle = (linalg::dot(&t, &v) as f64).clamp(-1.0, 1.0).acos().to_degrees();
            assert!((angle - 15.0).abs() < 0.05, "{angle}");
        }
    }

    #[test]
    fn zero_noise_views_match_exactly() {
        let spec = SynthSpec { sigma_deg: 0.0, occlusion: 0.0, ..small() };
        let d = generate(&spec).unwrap();
        let get = |id: &str| d.token_sets.iter().find(|t| t.image_id == id).unwrap();
        let (q, g) = (get("id00002_q0"), get("id00002_g1"));
        let s = late_interaction_score(q.tokens(), g.tokens(), 16).unwrap();
        assert!((s - 1.0).abs() < 1e-6, "{s}");
    }

    #[test]
    fn deterministic_across_threads() {
        let a = par::with_threads(1, || generate(&small()).unwrap());
        let b = par::with_threads(4, || generate(&small()).unwrap());
        assert_eq!(a.token_sets, b.token_sets);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate(&SynthSpec { occlusion: 1.5, ..small() }).is_err());
        assert!(generate(&SynthSpec { instance_tokens: 17, ..small() }).is_err());
        assert!(generate(&SynthSpec { identities: 0, distractors: 0, ..small() }).is_err());
    }
}
