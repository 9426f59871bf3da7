//! Synthetic pseudo-speech corpus: each task token owns a fixed template
//! vector in feature space; an utterance emits a few noisy copies of the
//! template per transcript token, so the frame/token alignment is many-to-one
//! with variable durations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::vocab::Vocab;

/// Parameters of the synthetic task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    /// Number of task tokens (excluding specials).
    pub vocab_size: usize,
    /// Feature dimension F. Frames are F-dim vectors at a nominal 10 ms shift.
    pub feature_dim: usize,
    /// Transcript length range, inclusive.
    pub min_len: usize,
    pub max_len: usize,
    /// Frames emitted per transcript token, inclusive range.
    pub min_dur: usize,
    pub max_dur: usize,
    /// Stddev of the additive frame noise.
    pub noise_sigma: f64,
    /// Seed of the task itself: fixes the token template vectors.
    pub seed: u64,
    /// Split stream (0 = train). Different splits draw disjoint utterance
    /// sequences from the same task, sharing the templates.
    pub split: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            vocab_size: 16,
            feature_dim: 20,
            min_len: 3,
            max_len: 12,
            min_dur: 2,
            max_dur: 4,
            noise_sigma: 0.3,
            seed: 17,
            split: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.vocab_size == 0 {
            return Err("task.vocab_size must be >= 1".into());
        }
        if self.feature_dim == 0 {
            return Err("task.feature_dim must be >= 1".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err("task transcript length range is empty".into());
        }
        if self.min_dur == 0 || self.min_dur > self.max_dur {
            return Err("task duration range is empty".into());
        }
        if self.noise_sigma < 0.0 {
            return Err("task.noise_sigma must be >= 0".into());
        }
        Ok(())
    }
}

/// One utterance: a T×F frame matrix plus its reference token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Row-major T×F, stored at the container's f32 precision.
    pub frames: Vec<f32>,
    pub n_frames: usize,
    pub feature_dim: usize,
    /// Task token ids only — never specials.
    pub transcript: Vec<u32>,
}

impl Utterance {
    /// Frame row t as f64 for model ingestion.
    pub fn frame(&self, t: usize) -> impl Iterator<Item = f64> + '_ {
        self.frames[t * self.feature_dim..(t + 1) * self.feature_dim]
            .iter()
            .map(|&v| v as f64)
    }

    pub fn frames_f64(&self) -> Vec<f64> {
        self.frames.iter().map(|&v| v as f64).collect()
    }

    /// Speech seconds at the nominal 10 ms frame shift.
    pub fn speech_seconds(&self) -> f64 {
        self.n_frames as f64 * 0.010
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub feature_dim: usize,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }
}

/// Per-token template vectors, drawn once from the config seed: N(0,1) per
/// dimension, indexed by task token order (row i ↔ token id 5+i).
pub fn token_templates(cfg: &TaskConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..cfg.vocab_size * cfg.feature_dim)
        .map(|_| normal.sample(&mut rng))
        .collect()
}

fn utterance_seed(seed: u64, split: u64, index: usize) -> u64 {
    // splitmix64 over a per-split index stream keeps utterances independent
    // while every split shares the template vectors drawn from `seed`
    let stream = split.wrapping_mul(1 << 32).wrapping_add(index as u64);
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate `n_utts` utterances and the matching vocabulary. A pure function
/// of (cfg, n_utts); utterances use independently derived seeds.
pub fn generate_corpus(cfg: &TaskConfig, n_utts: usize) -> Corpus {
    assert!(n_utts >= 1, "generate_corpus requires n_utts >= 1");
    cfg.validate().expect("valid TaskConfig");
    let vocab = Vocab::synthetic(cfg.vocab_size);
    let templates = token_templates(cfg);
    let f = cfg.feature_dim;
    let normal = Normal::new(0.0, 1.0).unwrap();

    let utterances = (0..n_utts)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(utterance_seed(cfg.seed, cfg.split, i));
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let transcript: Vec<u32> = (0..len)
                .map(|_| Vocab::N_SPECIALS + rng.gen_range(0..cfg.vocab_size) as u32)
                .collect();
            let mut frames = Vec::new();
            for &tok in &transcript {
                let template = &templates[(tok - Vocab::N_SPECIALS) as usize * f..][..f];
                let dur = rng.gen_range(cfg.min_dur..=cfg.max_dur);
                for _ in 0..dur {
                    for &tv in template {
                        let noise = if cfg.noise_sigma > 0.0 {
                            cfg.noise_sigma * normal.sample(&mut rng)
                        } else {
                            0.0
                        };
                        frames.push((tv + noise) as f32);
                    }
                }
            }
            let n_frames = frames.len() / f;
            Utterance {
                id: if cfg.split == 0 {
                    format!("utt-{i:05}")
                } else {
                    format!("utt-{}-{i:05}", cfg.split)
                },
                frames,
                n_frames,
                feature_dim: f,
                transcript,
            }
        })
        .collect();

    Corpus {
        vocab,
        feature_dim: f,
        utterances,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = TaskConfig::default();
        let a = generate_corpus(&cfg, 20);
        let b = generate_corpus(&cfg, 20);
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = TaskConfig::default();
        let other = TaskConfig { seed: 18, ..cfg.clone() };
        assert_ne!(generate_corpus(&cfg, 5), generate_corpus(&other, 5));
    }

    #[test]
    fn splits_share_templates_but_not_utterances() {
        let train = TaskConfig::default();
        let dev = TaskConfig { split: 1, ..train.clone() };
        assert_eq!(token_templates(&train), token_templates(&dev));
        let a = generate_corpus(&train, 5);
        let b = generate_corpus(&dev, 5);
        assert_eq!(a.vocab, b.vocab);
        for (ua, ub) in a.utterances.iter().zip(&b.utterances) {
            assert_ne!(ua.frames, ub.frames);
        }
    }

    #[test]
    fn invariants_hold() {
        let cfg = TaskConfig::default();
        let corpus = generate_corpus(&cfg, 50);
        for u in &corpus.utterances {
            assert!(u.n_frames >= 1);
            assert!(!u.transcript.is_empty());
            assert!((cfg.min_len..=cfg.max_len).contains(&u.transcript.len()));
            assert!(u.transcript.iter().all(|&t| !Vocab::is_special(t)));
            assert_eq!(u.frames.len(), u.n_frames * u.feature_dim);
            let per_tok = u.n_frames as f64 / u.transcript.len() as f64;
            assert!(per_tok >= cfg.min_dur as f64 && per_tok <= cfg.max_dur as f64);
        }
    }

    #[test]
    fn noiseless_frames_equal_templates() {
        let cfg = TaskConfig {
            noise_sigma: 0.0,
            ..TaskConfig::default()
        };
        let corpus = generate_corpus(&cfg, 10);
        let templates = token_templates(&cfg);
        let f = cfg.feature_dim;
        for u in &corpus.utterances {
            // every frame must exactly equal one of its transcript's templates
            let mut t = 0usize;
            let mut frame_idx = 0usize;
            while frame_idx < u.n_frames {
                let tok = u.transcript[t];
                let template = &templates[(tok - Vocab::N_SPECIALS) as usize * f..][..f];
                let frame = &u.frames[frame_idx * f..(frame_idx + 1) * f];
                let matches = frame
                    .iter()
                    .zip(template)
                    .all(|(&fr, &tv)| fr == tv as f32);
                if matches {
                    frame_idx += 1;
                } else {
                    t += 1;
                    assert!(t < u.transcript.len(), "frame matches no remaining template");
                }
            }
        }
    }

    #[test]
    fn nearest_template_classifier_recovers_transcripts() {
        // σ=0 and durations pinned to 2: decoding frames by nearest template
        // and collapsing pairs must reproduce every transcript exactly.
        let cfg = TaskConfig {
            noise_sigma: 0.0,
            min_dur: 2,
            max_dur: 2,
            ..TaskConfig::default()
        };
        let corpus = generate_corpus(&cfg, 30);
        let templates = token_templates(&cfg);
        let f = cfg.feature_dim;
        for u in &corpus.utterances {
            let mut decoded = Vec::new();
            for chunk in u.frames.chunks(2 * f) {
                let frame: Vec<f64> = chunk[..f].iter().map(|&v| v as f64).collect();
                let (best, _) = (0..cfg.vocab_size)
                    .map(|k| {
                        let tmpl = &templates[k * f..(k + 1) * f];
                        let d: f64 = frame
                            .iter()
                            .zip(tmpl)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        (k, d)
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap();
                decoded.push(Vocab::N_SPECIALS + best as u32);
            }
            assert_eq!(decoded, u.transcript, "utterance {}", u.id);
        }
    }
}
