#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use cfcount::client::{
    request_key, Capabilities, ClientError, Feature, GenerateRequest, GenerateResponse, InferenceClient,
    LayerAttention,
};
use cfcount::manifest::{save_manifest, AnnotationRef, Category, InstanceRecord, Manifest};
use cfcount::region::{BBox, BinaryMask};

pub const IMAGE: u32 = 32;
pub const GRID: u32 = 4;
pub const LAYERS: usize = 6;

/// Writes `n` instances cycling through the categories, with images, masks
/// and `manifest.json` under `dir`. Returns the manifest path.
pub fn write_fixture(dir: &Path, n: usize) -> PathBuf {
    let mut instances = Vec::new();
    for i in 0..n {
        let id = format!("obj-{i:03}");
        let category = Category::ALL[i % Category::ALL.len()];
        let shade = (i * 37 % 255) as u8;
        for (suffix, offset) in [("f", 0u8), ("cf", 90)] {
            let img = image::RgbImage::from_fn(IMAGE, IMAGE, |x, y| {
                image::Rgb([shade, offset.wrapping_add(x as u8 * 4), y as u8 * 4])
            });
            img.save(dir.join(format!("{id}-{suffix}.png"))).unwrap();
        }
        let x0 = (i as u32 * 3) % 16;
        let bbox = BBox::new(x0, 4, x0 + 12, 20);
        let mask = BinaryMask::from_fn(IMAGE, IMAGE, |x, y| {
            x >= x0 + 2 && x < x0 + 14 && (6..18).contains(&y)
        });
        mask.save_png(&dir.join(format!("{id}-mask.png"))).unwrap();
        let canonical = 2 + (i as u32 % 3);
        instances.push(InstanceRecord {
            id: id.clone(),
            category,
            subject_name: format!("thing{i}"),
            neutral_name: "object".into(),
            attribute_name: "leg".into(),
            attribute_plural: None,
            canonical_count: canonical,
            counterfactual_count: canonical + 1 + (i as u32 % 2),
            factual_image: format!("{id}-f.png").into(),
            cf_image: format!("{id}-cf.png").into(),
            annotation: AnnotationRef {
                mask: format!("{id}-mask.png").into(),
                bbox,
            },
            shuffle_seed: 1000 + i as u64,
        });
    }
    let manifest = Manifest {
        version: "test-1".into(),
        image_width: IMAGE,
        image_height: IMAGE,
        instances,
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join("manifest.json");
    save_manifest(&manifest, &path).unwrap();
    path
}

pub fn sidecar_caps() -> Capabilities {
    Capabilities {
        features: [Feature::Modulation, Feature::Attention].into(),
        grid_w: Some(GRID),
        grid_h: Some(GRID),
        n_layers: Some(LAYERS),
        attention_definition: Some("generated-token queries, mean over heads".into()),
        model: Some("scripted".into()),
    }
}

/// Deterministic stand-in for a model: the reply is a pure function of the
/// request. Judge prompts get a single digit back; some answers mention two
/// numbers so the judge path is exercised.
pub struct ScriptedClient {
    pub caps: Capabilities,
    pub calls: AtomicUsize,
    /// Fail every generate call with a fatal error once this many succeeded.
    pub fail_after: Option<usize>,
    /// Fail requests whose key starts with this prefix with a transport error.
    pub flaky_prefix: Option<String>,
}

impl ScriptedClient {
    pub fn new() -> Self {
        Self {
            caps: sidecar_caps(),
            calls: AtomicUsize::new(0),
            fail_after: None,
            flaky_prefix: None,
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl InferenceClient for ScriptedClient {
    fn describe(&self) -> String {
        "scripted".into()
    }

    fn capabilities(&self) -> Result<Capabilities, ClientError> {
        Ok(self.caps.clone())
    }

    fn generate(&self, request: &GenerateRequest) -> Result<GenerateResponse, ClientError> {
        request.validate(&self.caps, "scripted")?;
        let key = request_key(request);
        if let Some(p) = &self.flaky_prefix {
            if key.starts_with(p.as_str()) {
                return Err(ClientError::Transport("scripted outage".into()));
            }
        }
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail_after.is_some_and(|k| n >= k) {
            return Err(ClientError::Unsupported {
                endpoint: "scripted".into(),
                feature: "simulated crash".into(),
            });
        }
        let h = u64::from_str_radix(&key[..12], 16).unwrap();
        let text = if request.prompt.starts_with("Question:") {
            format!("{}", h % 6)
        } else {
            match h % 4 {
                0 => format!("The object has {} legs.", h % 6),
                1 => format!("I count {} legs, though such things usually have {}.", h % 6, (h >> 8) % 6),
                2 => "I cannot tell.".to_string(),
                _ => format!("{}", (h >> 4) % 6),
            }
        };
        let per_layer_attention = request.return_attention.then(|| {
            (0..LAYERS)
                .map(|l| LayerAttention {
                    mean_all_visual: 0.01 + 0.001 * l as f64,
                    mean_selected: 0.02 + 0.002 * (h % 5) as f64 + 0.001 * l as f64,
                })
                .collect()
        });
        Ok(GenerateResponse {
            text,
            token_grid: Some([GRID, GRID]),
            per_layer_attention,
        })
    }
}
