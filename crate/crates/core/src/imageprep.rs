//! Image loading, resolution scaling and wire encoding.
//!
//! A resolution level is a target *height*; width follows from the source
//! aspect ratio. Resampling uses the triangle (bilinear) filter and renditions
//! keep the source container format (PNG stays PNG, JPEG is re-encoded at
//! quality 90). Output dimensions are exact on every platform; output bytes
//! are only promised stable on one platform.

use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use base64::Engine;
use image::imageops::FilterType;
use image::{DynamicImage, ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image `{id}`: cannot read {path}: {source}")]
    Io {
        id: String,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image `{id}`: decode failed: {reason}")]
    Decode { id: String, reason: String },
    #[error("image `{id}`: unsupported media type")]
    UnsupportedMedia { id: String },
    #[error("image `{id}`: encode failed: {reason}")]
    Encode { id: String, reason: String },
}

/// Target image height in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum ResolutionLevel {
    P180,
    P240,
    #[default]
    P360,
    P540,
    P720,
}

impl ResolutionLevel {
    pub const ALL: [ResolutionLevel; 5] = [
        ResolutionLevel::P180,
        ResolutionLevel::P240,
        ResolutionLevel::P360,
        ResolutionLevel::P540,
        ResolutionLevel::P720,
    ];

    pub fn height(self) -> u32 {
        match self {
            ResolutionLevel::P180 => 180,
            ResolutionLevel::P240 => 240,
            ResolutionLevel::P360 => 360,
            ResolutionLevel::P540 => 540,
            ResolutionLevel::P720 => 720,
        }
    }

    pub fn from_height(height: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.height() == height)
    }
}

impl fmt::Display for ResolutionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}p", self.height())
    }
}

impl FromStr for ResolutionLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let digits = s.trim().trim_end_matches(['p', 'P']);
        digits
            .parse::<u32>()
            .ok()
            .and_then(Self::from_height)
            .ok_or_else(|| {
                format!("unknown resolution `{s}` (expected one of 180, 240, 360, 540, 720)")
            })
    }
}

impl TryFrom<u32> for ResolutionLevel {
    type Error = String;

    fn try_from(value: u32) -> Result<Self, Self::Error> {
        Self::from_height(value).ok_or_else(|| format!("unknown resolution {value}"))
    }
}

impl From<ResolutionLevel> for u32 {
    fn from(level: ResolutionLevel) -> u32 {
        level.height()
    }
}

/// Pixel-count ratio between two levels, `(level / base)^2`.
pub fn token_scale_factor(level: ResolutionLevel, base: ResolutionLevel) -> f64 {
    let r = f64::from(level.height()) / f64::from(base.height());
    r * r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediaType {
    Png,
    Jpeg,
}

impl MediaType {
    /// Sniffs the container format from magic bytes.
    pub fn sniff(bytes: &[u8]) -> Option<MediaType> {
        if bytes.starts_with(&[0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a]) {
            Some(MediaType::Png)
        } else if bytes.starts_with(&[0xff, 0xd8, 0xff]) {
            Some(MediaType::Jpeg)
        } else {
            None
        }
    }

    pub fn mime(self) -> &'static str {
        match self {
            MediaType::Png => "image/png",
            MediaType::Jpeg => "image/jpeg",
        }
    }

    fn format(self) -> ImageFormat {
        match self {
            MediaType::Png => ImageFormat::Png,
            MediaType::Jpeg => ImageFormat::Jpeg,
        }
    }
}

/// Present on images produced by [`resize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rendition {
    pub level: ResolutionLevel,
    pub upscaled: bool,
}

/// An encoded image plus its metadata. Cloning is cheap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageInput {
    pub id: String,
    pub source: Option<PathBuf>,
    pub media_type: MediaType,
    pub width: u32,
    pub height: u32,
    pub rendition: Option<Rendition>,
    bytes: Arc<[u8]>,
    digest: String,
}

/// Hex SHA-256 of a byte string.
pub fn content_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ImageInput {
    pub fn from_bytes(
        id: impl Into<String>,
        bytes: impl Into<Arc<[u8]>>,
    ) -> Result<Self, ImageError> {
        let id = id.into();
        let bytes: Arc<[u8]> = bytes.into();
        let media_type = MediaType::sniff(&bytes)
            .ok_or_else(|| ImageError::UnsupportedMedia { id: id.clone() })?;
        let (width, height) =
            ImageReader::with_format(Cursor::new(&bytes[..]), media_type.format())
                .into_dimensions()
                .map_err(|e| ImageError::Decode {
                    id: id.clone(),
                    reason: e.to_string(),
                })?;
        if width == 0 || height == 0 {
            return Err(ImageError::Decode {
                id,
                reason: "zero-sized image".into(),
            });
        }
        let digest = content_digest(&bytes);
        Ok(ImageInput {
            id,
            source: None,
            media_type,
            width,
            height,
            rendition: None,
            bytes,
            digest,
        })
    }

    pub fn from_path(id: impl Into<String>, path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let id = id.into();
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
            id: id.clone(),
            path: path.to_path_buf(),
            source,
        })?;
        let mut image = Self::from_bytes(id, bytes)?;
        image.source = Some(path.to_path_buf());
        Ok(image)
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Hex SHA-256 of the encoded bytes.
    pub fn digest(&self) -> &str {
        &self.digest
    }
}

/// Width after scaling to `target_height`, rounded half up, at least 1.
pub fn scaled_width(width: u32, height: u32, target_height: u32) -> u32 {
    let num = u64::from(width) * u64::from(target_height) * 2 + u64::from(height);
    let w = num / (2 * u64::from(height));
    w.max(1) as u32
}

/// Scales an image to the level's height, preserving aspect ratio.
pub fn resize(image: &ImageInput, level: ResolutionLevel) -> Result<ImageInput, ImageError> {
    let target_h = level.height();
    if image.height == target_h {
        let mut same = image.clone();
        same.rendition = Some(Rendition {
            level,
            upscaled: false,
        });
        return Ok(same);
    }
    let target_w = scaled_width(image.width, image.height, target_h);
    let decoded = image::load_from_memory_with_format(image.bytes(), image.media_type.format())
        .map_err(|e| ImageError::Decode {
            id: image.id.clone(),
            reason: e.to_string(),
        })?;
    let scaled = decoded.resize_exact(target_w, target_h, FilterType::Triangle);
    let mut out = Cursor::new(Vec::new());
    let encoded = match image.media_type {
        MediaType::Png => scaled.write_to(&mut out, ImageFormat::Png),
        MediaType::Jpeg => {
            let rgb = DynamicImage::ImageRgb8(scaled.to_rgb8());
            image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, 90).encode_image(&rgb)
        }
    };
    encoded.map_err(|e| ImageError::Encode {
        id: image.id.clone(),
        reason: e.to_string(),
    })?;
    let bytes: Arc<[u8]> = out.into_inner().into();
    Ok(ImageInput {
        id: image.id.clone(),
        source: image.source.clone(),
        media_type: image.media_type,
        width: target_w,
        height: target_h,
        rendition: Some(Rendition {
            level,
            upscaled: target_h > image.height,
        }),
        digest: content_digest(&bytes),
        bytes,
    })
}

/// RFC 2397 base64 data URI for the image bytes.
pub fn encode_for_wire(image: &ImageInput) -> Result<String, ImageError> {
    data_uri(&image.id, image.bytes())
}

/// Data URI for raw bytes; the media type is sniffed.
pub fn data_uri(id: &str, bytes: &[u8]) -> Result<String, ImageError> {
    let media = MediaType::sniff(bytes)
        .ok_or_else(|| ImageError::UnsupportedMedia { id: id.to_string() })?;
    let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{};base64,{}", media.mime(), b64))
}

/// Encodes a solid-ish test pattern as PNG. Used by fixtures and benches.
pub fn synthetic_png(width: u32, height: u32, seed: u32) -> Vec<u8> {
    let img = image::RgbImage::from_fn(width, height, |x, y| {
        let v = x.wrapping_mul(31) ^ y.wrapping_mul(17) ^ seed.wrapping_mul(2_654_435_761);
        image::Rgb([
            (v & 0xff) as u8,
            ((v >> 8) & 0xff) as u8,
            (seed & 0xff) as u8,
        ])
    });
    let mut out = Cursor::new(Vec::new());
    DynamicImage::ImageRgb8(img)
        .write_to(&mut out, ImageFormat::Png)
        .expect("in-memory PNG encode");
    out.into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn png(w: u32, h: u32) -> ImageInput {
        ImageInput::from_bytes("fixture", synthetic_png(w, h, 7)).unwrap()
    }

    #[test]
    fn exact_scales() {
        let out = resize(&png(1280, 720), ResolutionLevel::P360).unwrap();
        assert_eq!((out.width, out.height), (640, 360));
        assert!(!out.rendition.unwrap().upscaled);
        assert_eq!(scaled_width(1920, 1080, 540), 960);
    }

    #[test]
    fn odd_aspect_rounding() {
        // Independent check: 1000 * 180 / 333 = 540.54..., rounds to 541.
        let expected = (1000.0_f64 * 180.0 / 333.0).round() as u32;
        assert_eq!(expected, 541);
        assert_eq!(scaled_width(1000, 333, 180), expected);
        let out = resize(&png(1000, 333), ResolutionLevel::P180).unwrap();
        assert_eq!((out.width, out.height), (541, 180));
    }

    #[test]
    fn upscale_is_flagged() {
        let out = resize(&png(64, 36), ResolutionLevel::P180).unwrap();
        assert_eq!((out.width, out.height), (320, 180));
        assert!(out.rendition.unwrap().upscaled);
    }

    #[test]
    fn resize_idempotent() {
        let once = resize(&png(300, 200), ResolutionLevel::P240).unwrap();
        let twice = resize(&once, ResolutionLevel::P240).unwrap();
        assert_eq!((once.width, once.height), (twice.width, twice.height));
        assert_eq!(once.digest(), twice.digest());
    }

    #[test]
    fn jpeg_round_trip() {
        let img = image::RgbImage::from_pixel(80, 60, image::Rgb([10, 200, 30]));
        let mut buf = Cursor::new(Vec::new());
        DynamicImage::ImageRgb8(img)
            .write_to(&mut buf, ImageFormat::Jpeg)
            .unwrap();
        let input = ImageInput::from_bytes("j", buf.into_inner()).unwrap();
        assert_eq!(input.media_type, MediaType::Jpeg);
        let out = resize(&input, ResolutionLevel::P180).unwrap();
        assert_eq!((out.width, out.height), (240, 180));
        assert!(encode_for_wire(&out)
            .unwrap()
            .starts_with("data:image/jpeg;base64,"));
    }

    #[test]
    fn token_scale_factors() {
        use ResolutionLevel::*;
        assert_eq!(token_scale_factor(P540, P360), 2.25);
        assert_eq!(token_scale_factor(P720, P360), 4.0);
        assert_eq!(token_scale_factor(P360, P360), 1.0);
        for a in ResolutionLevel::ALL {
            for b in ResolutionLevel::ALL {
                let product = token_scale_factor(a, b) * token_scale_factor(b, a);
                assert!((product - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn undecodable_and_empty() {
        let err = ImageInput::from_bytes(
            "bad",
            vec![0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a, 0, 1],
        )
        .unwrap_err();
        assert!(matches!(err, ImageError::Decode { ref id, .. } if id == "bad"));
        let err = ImageInput::from_bytes("empty", Vec::new()).unwrap_err();
        assert!(matches!(err, ImageError::UnsupportedMedia { .. }));
        assert!(matches!(
            data_uri("empty", &[]),
            Err(ImageError::UnsupportedMedia { .. })
        ));
    }

    #[test]
    fn digest_is_pure() {
        let a = png(10, 10);
        let b = png(10, 10);
        assert_eq!(a.digest(), b.digest());
        assert_eq!(encode_for_wire(&a).unwrap(), encode_for_wire(&b).unwrap());
        let c = ImageInput::from_bytes("c", synthetic_png(10, 10, 8)).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn level_parsing() {
        assert_eq!(
            "360p".parse::<ResolutionLevel>().unwrap(),
            ResolutionLevel::P360
        );
        assert_eq!(
            "720".parse::<ResolutionLevel>().unwrap(),
            ResolutionLevel::P720
        );
        assert!("1080p".parse::<ResolutionLevel>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn area_ratio_tracks_token_factor(h in 100u32..1200, aspect_pct in 100u32..250, li in 0usize..5, bi in 0usize..5) {
            let w = h * aspect_pct / 100;
            let level = ResolutionLevel::ALL[li];
            let base = ResolutionLevel::ALL[bi];
            let area = |l: ResolutionLevel| f64::from(scaled_width(w, h, l.height())) * f64::from(l.height());
            let ratio = area(level) / area(base);
            let expected = token_scale_factor(level, base);
            prop_assert!((ratio / expected - 1.0).abs() <= 0.02, "ratio {} vs {}", ratio, expected);
            let sw = scaled_width(w, h, level.height());
            let exact = f64::from(w) * f64::from(level.height()) / f64::from(h);
            prop_assert!((f64::from(sw) - exact).abs() <= 1.0);
        }
    }
}
