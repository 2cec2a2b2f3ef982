//! JSON wire format of the inference protocol, version `v1`.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use flakescan_core::{BBox, Category, Detection, MaskGeometry, Material, Thickness};
use image::codecs::png::{CompressionType, FilterType, PngDecoder, PngEncoder};
use image::{ImageDecoder, ImageEncoder, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::ProtocolError;

pub const PROTOCOL_VERSION: &str = "v1";
pub const SUPPORTED_VERSIONS: &[&str] = &[PROTOCOL_VERSION];
/// Largest image side the reference servers accept.
pub const MAX_SIDE: u32 = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct InferRequest {
    pub version: String,
    pub chip_id: String,
    pub tile_id: String,
    pub model: String,
    /// Encoded PNG.
    pub image_png: Vec<u8>,
}

impl InferRequest {
    pub fn new(chip_id: impl Into<String>, tile_id: impl Into<String>, model: impl Into<String>, image_png: Vec<u8>) -> Self {
        Self {
            version: PROTOCOL_VERSION.into(),
            chip_id: chip_id.into(),
            tile_id: tile_id.into(),
            model: model.into(),
            image_png,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferResponse {
    pub version: String,
    pub model: String,
    /// Server-side inference time.
    pub timing_ms: f64,
    pub detections: Vec<Detection>,
}

#[derive(Serialize, Deserialize)]
struct RequestBody<'a> {
    version: std::borrow::Cow<'a, str>,
    chip_id: std::borrow::Cow<'a, str>,
    tile_id: std::borrow::Cow<'a, str>,
    model: std::borrow::Cow<'a, str>,
    image_b64: String,
}

/// One detection as it travels on the wire: category flattened into
/// `material` and `thickness`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub material: Material,
    pub thickness: Thickness,
    pub score: f64,
    pub bbox: BBox,
    pub mask: MaskGeometry,
}

impl From<&Detection> for WireDetection {
    fn from(d: &Detection) -> Self {
        Self {
            material: d.category.material,
            thickness: d.category.thickness,
            score: d.score,
            bbox: d.bbox,
            mask: d.mask.clone(),
        }
    }
}

impl From<WireDetection> for Detection {
    fn from(w: WireDetection) -> Self {
        Detection {
            category: Category::new(w.material, w.thickness),
            score: w.score,
            bbox: w.bbox,
            mask: w.mask,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ResponseBody {
    version: String,
    model: String,
    timing_ms: f64,
    detections: Vec<WireDetection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub models: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub tag: String,
    pub max_side: u32,
    pub formats: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelList {
    pub version: String,
    pub models: Vec<ModelInfo>,
}

fn check_version(v: &str) -> Result<(), ProtocolError> {
    if SUPPORTED_VERSIONS.contains(&v) {
        Ok(())
    } else {
        Err(ProtocolError::UnsupportedVersion(v.to_string()))
    }
}

/// Image dimensions from the PNG header.
pub fn png_dimensions(bytes: &[u8]) -> Result<(u32, u32), ProtocolError> {
    let dec = PngDecoder::new(std::io::Cursor::new(bytes)).map_err(|e| ProtocolError::Image(e.to_string()))?;
    Ok(dec.dimensions())
}

/// Tiles are noise-dominated, so deflate buys almost nothing; stored blocks
/// keep encoding cheap.
pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    encode_png_with(img, CompressionType::Uncompressed)
}

pub fn encode_png_with(img: &RgbImage, compression: CompressionType) -> Vec<u8> {
    let mut buf = Vec::with_capacity(img.as_raw().len() + 4096);
    PngEncoder::new_with_quality(&mut buf, compression, FilterType::NoFilter)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .expect("encoding to memory");
    buf
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage, ProtocolError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| ProtocolError::Image(e.to_string()))?;
    Ok(img.into_rgb8())
}

fn malformed(e: serde_json::Error) -> ProtocolError {
    ProtocolError::Malformed {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

pub fn encode_request(req: &InferRequest) -> Vec<u8> {
    serde_json::to_vec(&RequestBody {
        version: req.version.as_str().into(),
        chip_id: req.chip_id.as_str().into(),
        tile_id: req.tile_id.as_str().into(),
        model: req.model.as_str().into(),
        image_b64: B64.encode(&req.image_png),
    })
    .expect("serializable")
}

pub fn decode_request(bytes: &[u8]) -> Result<InferRequest, ProtocolError> {
    let body: RequestBody = serde_json::from_slice(bytes).map_err(malformed)?;
    check_version(&body.version)?;
    for (name, v) in [("chip_id", &body.chip_id), ("tile_id", &body.tile_id), ("model", &body.model)] {
        if v.is_empty() {
            return Err(ProtocolError::Invalid(format!("{name} must be nonempty")));
        }
    }
    let image_png = B64.decode(body.image_b64.as_bytes()).map_err(|e| ProtocolError::Base64(e.to_string()))?;
    let (w, h) = png_dimensions(&image_png)?;
    if w == 0 || h == 0 {
        return Err(ProtocolError::Image("zero-sized image".into()));
    }
    Ok(InferRequest {
        version: body.version.into_owned(),
        chip_id: body.chip_id.into_owned(),
        tile_id: body.tile_id.into_owned(),
        model: body.model.into_owned(),
        image_png,
    })
}

pub fn encode_response(resp: &InferResponse) -> Vec<u8> {
    serde_json::to_vec(&ResponseBody {
        version: resp.version.clone(),
        model: resp.model.clone(),
        timing_ms: resp.timing_ms,
        detections: resp.detections.iter().map(WireDetection::from).collect(),
    })
    .expect("serializable")
}

pub fn decode_response(bytes: &[u8]) -> Result<InferResponse, ProtocolError> {
    let body: ResponseBody = serde_json::from_slice(bytes).map_err(malformed)?;
    check_version(&body.version)?;
    if !(body.timing_ms >= 0.0) {
        return Err(ProtocolError::Invalid(format!("timing_ms {} is negative", body.timing_ms)));
    }
    let detections = body
        .detections
        .into_iter()
        .enumerate()
        .map(|(i, w)| {
            let d = Detection::from(w);
            d.validate().map_err(|e| ProtocolError::Detection { index: i, message: e.to_string() })?;
            Ok(d)
        })
        .collect::<Result<Vec<_>, ProtocolError>>()?;
    Ok(InferResponse {
        version: body.version,
        model: body.model,
        timing_ms: body.timing_ms,
        detections,
    })
}
