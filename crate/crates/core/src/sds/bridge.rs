//! HTTP client for an external diffusion service.
//!
//! Endpoints, all JSON:
//! - `GET  /v1/health`   → `{"mode", "ok"}`
//! - `POST /v1/edit`     → PNG images in, edited PNG images out
//! - `POST /v1/guidance` → renders as raw little-endian `f32` `H×W×3`, one
//!   image-space residual per render back
//!
//! Failures come back as non-200 responses carrying `{"error": ...}`. Every
//! call is retried twice before it fails.

use std::collections::BTreeMap;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{CfgScales, GuidanceModel, GuidanceQuery};
use crate::diffeng::Tensor;
use crate::image::Image;
use crate::scene_io::{decode_png, encode_png};
use crate::{Error, Result};

pub const RETRIES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub images: Vec<String>,
    pub instruction: String,
    #[serde(rename = "s_I")]
    pub s_i: f64,
    #[serde(rename = "s_T")]
    pub s_t: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditResponse {
    pub images: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRequest {
    pub rendered: Vec<String>,
    pub originals: Vec<String>,
    pub instruction: String,
    #[serde(rename = "s_I")]
    pub s_i: f64,
    #[serde(rename = "s_T")]
    pub s_t: f64,
    pub t: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceResponse {
    pub grad_images: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub mode: String,
    pub ok: bool,
}

pub fn png_to_base64(img: &Image) -> Result<String> {
    Ok(B64.encode(encode_png(img)?))
}

pub fn png_from_base64(s: &str) -> Result<Image, String> {
    let bytes = B64.decode(s).map_err(|e| format!("base64: {e}"))?;
    decode_png(&bytes)
}

/// Row-major `H×W×3` values as little-endian `f32`, base64 encoded.
pub fn f32_to_base64(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    B64.encode(bytes)
}

/// Inverse of [`f32_to_base64`], checked against the expected shape.
pub fn f32_from_base64(s: &str, height: usize, width: usize) -> Result<Tensor, String> {
    let bytes = B64.decode(s).map_err(|e| format!("base64: {e}"))?;
    let want = height * width * 3 * 4;
    if bytes.len() != want {
        return Err(format!(
            "expected {want} bytes for {height}×{width}×3 f32, got {}",
            bytes.len()
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new([height, width, 3], data).map_err(|e| e.to_string())
}

#[derive(Clone, Debug)]
pub struct BridgeClient {
    base: String,
    agent: ureq::Agent,
}

impl BridgeClient {
    pub fn new(base_url: &str, timeout: Duration) -> Result<Self> {
        if !(base_url.starts_with("http://") || base_url.starts_with("https://")) {
            return Err(Error::invalid(
                "bridge url",
                format!("{base_url:?} is not an http(s) URL"),
            ));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            base: base_url.trim_end_matches('/').to_string(),
            agent,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn once<T: DeserializeOwned>(&self, url: &str, body: Option<&str>) -> Result<T, (Option<u16>, String)> {
        let resp = match body {
            Some(b) => self.agent.post(url).header("content-type", "application/json").send(b),
            None => self.agent.get(url).call(),
        };
        let mut resp = resp.map_err(|e| (None, e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| (Some(status), e.to_string()))?;
        if status != 200 {
            let message = serde_json::from_str::<ErrorBody>(&text)
                .map(|e| e.error)
                .unwrap_or(text);
            return Err((Some(status), message));
        }
        serde_json::from_str(&text).map_err(|e| (Some(status), format!("malformed response: {e}")))
    }

    fn call<T: DeserializeOwned>(&self, path: &str, body: Option<String>) -> Result<T> {
        let url = self.endpoint(path);
        let mut last = (None, String::new());
        for _ in 0..=RETRIES {
            match self.once(&url, body.as_deref()) {
                Ok(v) => return Ok(v),
                Err(e) => last = e,
            }
        }
        Err(Error::Bridge {
            endpoint: url,
            status: last.0,
            message: last.1,
        })
    }

    fn bad_payload(&self, path: &str, message: String) -> Error {
        Error::Bridge {
            endpoint: self.endpoint(path),
            status: Some(200),
            message,
        }
    }

    pub fn health(&self) -> Result<Health> {
        self.call("/v1/health", None)
    }

    pub fn edit(&self, images: &[Image], instruction: &str, scales: CfgScales, seed: u64) -> Result<Vec<Image>> {
        let req = EditRequest {
            images: images.iter().map(png_to_base64).collect::<Result<_>>()?,
            instruction: instruction.to_string(),
            s_i: scales.image,
            s_t: scales.text,
            seed,
        };
        let resp: EditResponse = self.call("/v1/edit", Some(serde_json::to_string(&req).expect("serializable")))?;
        if resp.images.len() != images.len() {
            return Err(self.bad_payload(
                "/v1/edit",
                format!("sent {} images, got {}", images.len(), resp.images.len()),
            ));
        }
        resp.images
            .iter()
            .zip(images)
            .enumerate()
            .map(|(i, (s, orig))| {
                let img = png_from_base64(s).map_err(|e| self.bad_payload("/v1/edit", format!("images[{i}]: {e}")))?;
                if (img.width, img.height) != (orig.width, orig.height) {
                    return Err(self.bad_payload(
                        "/v1/edit",
                        format!(
                            "images[{i}] is {}×{}, sent {}×{}",
                            img.width, img.height, orig.width, orig.height
                        ),
                    ));
                }
                Ok(img)
            })
            .collect()
    }

    pub fn guidance(
        &self,
        rendered: &[&Image],
        originals: &[&Image],
        instruction: &str,
        scales: CfgScales,
        t: f64,
        seed: u64,
    ) -> Result<Vec<Tensor>> {
        let req = GuidanceRequest {
            rendered: rendered.iter().map(|r| f32_to_base64(&r.data)).collect(),
            originals: originals.iter().map(|o| png_to_base64(o)).collect::<Result<_>>()?,
            instruction: instruction.to_string(),
            s_i: scales.image,
            s_t: scales.text,
            t,
            seed,
        };
        let resp: GuidanceResponse =
            self.call("/v1/guidance", Some(serde_json::to_string(&req).expect("serializable")))?;
        if resp.grad_images.len() != rendered.len() {
            return Err(self.bad_payload(
                "/v1/guidance",
                format!(
                    "sent {} renders, got {} grad_images",
                    rendered.len(),
                    resp.grad_images.len()
                ),
            ));
        }
        resp.grad_images
            .iter()
            .zip(rendered)
            .enumerate()
            .map(|(i, (s, r))| {
                f32_from_base64(s, r.height as usize, r.width as usize)
                    .map_err(|e| self.bad_payload("/v1/guidance", format!("grad_images[{i}]: {e}")))
            })
            .collect()
    }
}

/// Guidance served by a remote bridge. Items sharing a diffusion time go
/// out as one request; the bridge draws its own noise from the seed.
pub struct BridgeGuidance {
    pub client: BridgeClient,
}

impl GuidanceModel for BridgeGuidance {
    fn residuals(&self, query: &GuidanceQuery) -> Result<Vec<Tensor>> {
        let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, item) in query.items.iter().enumerate() {
            groups.entry(item.t.to_bits()).or_default().push(i);
        }
        let mut out: Vec<Option<Tensor>> = vec![None; query.items.len()];
        for (bits, idx) in groups {
            let rendered: Vec<&Image> = idx.iter().map(|&i| query.items[i].rendered).collect();
            let originals: Vec<&Image> = idx.iter().map(|&i| query.items[i].original).collect();
            let grads = self.client.guidance(
                &rendered,
                &originals,
                query.instruction,
                query.scales,
                f64::from_bits(bits),
                query.seed,
            )?;
            for (i, g) in idx.into_iter().zip(grads) {
                out[i] = Some(g);
            }
        }
        Ok(out
            .into_iter()
            .map(|g| g.expect("every item is in one group"))
            .collect())
    }
}
