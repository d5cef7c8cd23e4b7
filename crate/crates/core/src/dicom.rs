//! Minimal DICOM subset: enough to validate headers, pick axial CT slices,
//! and recover Hounsfield-unit pixel data.
//!
//! Exactly one transfer syntax is supported (explicit VR little endian,
//! uncompressed). Anything else is a clean [`DicomError`]; a file that fails
//! to parse is "corrupted" and gets excluded upstream, never a panic.
//!
//! File layout: 128 zero bytes, `DICM`, then `(group, element, VR, length,
//! value)` records in little-endian byte order.

use std::fmt;

use thiserror::Error;

/// (group, element) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag(pub u16, pub u16);

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:04X},{:04X})", self.0, self.1)
    }
}

pub const TAG_MODALITY: Tag = Tag(0x0008, 0x0060);
pub const TAG_STUDY_UID: Tag = Tag(0x0020, 0x000D);
pub const TAG_SERIES_UID: Tag = Tag(0x0020, 0x000E);
pub const TAG_INSTANCE_NUMBER: Tag = Tag(0x0020, 0x0013);
pub const TAG_IMAGE_ORIENTATION: Tag = Tag(0x0020, 0x0037);
pub const TAG_ROWS: Tag = Tag(0x0028, 0x0010);
pub const TAG_COLS: Tag = Tag(0x0028, 0x0011);
pub const TAG_BITS_ALLOCATED: Tag = Tag(0x0028, 0x0100);
pub const TAG_RESCALE_INTERCEPT: Tag = Tag(0x0028, 0x1052);
pub const TAG_RESCALE_SLOPE: Tag = Tag(0x0028, 0x1053);
pub const TAG_PIXEL_DATA: Tag = Tag(0x7FE0, 0x0010);

/// Required tags in reporting order; the first absent one names the error.
const REQUIRED: [Tag; 11] = [
    TAG_MODALITY,
    TAG_STUDY_UID,
    TAG_SERIES_UID,
    TAG_INSTANCE_NUMBER,
    TAG_IMAGE_ORIENTATION,
    TAG_ROWS,
    TAG_COLS,
    TAG_BITS_ALLOCATED,
    TAG_RESCALE_INTERCEPT,
    TAG_RESCALE_SLOPE,
    TAG_PIXEL_DATA,
];

/// HU sanity clamp applied after rescale.
pub const HU_MIN: f32 = -1100.0;
pub const HU_MAX: f32 = 4000.0;

/// |slice normal · z| above this counts as axial.
pub const AXIAL_NORMAL_MIN: f64 = 0.9;

#[derive(Debug, Error, PartialEq)]
pub enum DicomError {
    #[error("missing DICM magic at offset 128")]
    MissingMagic,
    #[error("missing or invalid required tag {0}")]
    MissingRequiredTag(Tag),
    #[error("pixel payload truncated or inconsistent with rows*cols*bits")]
    TruncatedPixelData,
    #[error("unsupported transfer syntax (expected explicit VR little endian)")]
    UnsupportedTransferSyntax,
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("orientation vectors are not unit-norm")]
    NotUnitOrientation,
    #[error("rescale slope must be nonzero")]
    ZeroSlope,
    #[error("slices mix study uids")]
    MixedStudyUids,
    #[error("no axial CT slices left after filtering")]
    EmptyStudy,
    #[error("slices disagree on rows*cols")]
    ShapeMismatch,
}

/// Parsed header fields of one slice file.
#[derive(Debug, Clone, PartialEq)]
pub struct DicomHeader {
    pub modality: String,
    pub study_uid: String,
    pub series_uid: String,
    pub instance_number: i32,
    /// Direction cosines of the first row and first column.
    pub image_orientation: [f64; 6],
    pub rows: u16,
    pub cols: u16,
    pub bits_allocated: u16,
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
}

impl DicomHeader {
    fn validate(&self) -> Result<(), DicomError> {
        if self.rows == 0 || self.cols == 0 {
            return Err(DicomError::InvalidHeader("rows and cols must be > 0".into()));
        }
        if self.bits_allocated != 8 && self.bits_allocated != 16 {
            return Err(DicomError::InvalidHeader(format!(
                "bits_allocated must be 8 or 16, got {}",
                self.bits_allocated
            )));
        }
        if !unit_norm(&self.image_orientation[..3]) || !unit_norm(&self.image_orientation[3..]) {
            return Err(DicomError::InvalidHeader(
                "orientation vectors must be unit-norm within 1e-3".into(),
            ));
        }
        if self.rescale_slope == 0.0 {
            return Err(DicomError::InvalidHeader("rescale slope must be nonzero".into()));
        }
        Ok(())
    }
}

/// Raw stored pixel values, row-major. 8-bit data is widened to u16.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPixels {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u16>,
}

/// A study's ordered axial slice stack in Hounsfield units.
#[derive(Debug, Clone, PartialEq)]
pub struct HuVolume {
    pub study_uid: String,
    pub rows: usize,
    pub cols: usize,
    /// Sorted ascending by instance number.
    pub slices: Vec<Vec<f32>>,
}

fn unit_norm(v: &[f64]) -> bool {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    (n - 1.0).abs() <= 1e-3
}

// ---------------------------------------------------------------------------
// parsing
// ---------------------------------------------------------------------------

/// VRs whose explicit form carries a 4-byte length after 2 reserved bytes.
fn is_long_vr(vr: [u8; 2]) -> bool {
    matches!(&vr, b"OB" | b"OW" | b"OF" | b"SQ" | b"UT" | b"UN")
}

fn is_known_vr(vr: [u8; 2]) -> bool {
    matches!(
        &vr,
        b"AE" | b"AS" | b"AT" | b"CS" | b"DA" | b"DS" | b"DT" | b"FL" | b"FD" | b"IS" | b"LO"
            | b"LT" | b"OB" | b"OF" | b"OW" | b"PN" | b"SH" | b"SL" | b"SQ" | b"SS" | b"ST"
            | b"TM" | b"UI" | b"UL" | b"UN" | b"US" | b"UT"
    )
}

struct Element<'a> {
    vr: [u8; 2],
    value: &'a [u8],
}

/// Walk the record stream. Stops quietly at a truncated trailing record, but
/// a pixel-data record whose declared length overruns the buffer is reported
/// immediately.
fn scan_elements(bytes: &[u8]) -> Result<Vec<(Tag, Element<'_>)>, DicomError> {
    let mut out: Vec<(Tag, Element)> = Vec::new();
    let mut pos = 132usize;
    while pos + 8 <= bytes.len() {
        let group = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]);
        let element = u16::from_le_bytes([bytes[pos + 2], bytes[pos + 3]]);
        let tag = Tag(group, element);
        let vr = [bytes[pos + 4], bytes[pos + 5]];
        if !is_known_vr(vr) {
            return Err(DicomError::UnsupportedTransferSyntax);
        }
        let (len, header_len) = if is_long_vr(vr) {
            if pos + 12 > bytes.len() {
                break;
            }
            let len = u32::from_le_bytes([
                bytes[pos + 8],
                bytes[pos + 9],
                bytes[pos + 10],
                bytes[pos + 11],
            ]) as usize;
            (len, 12usize)
        } else {
            let len = u16::from_le_bytes([bytes[pos + 6], bytes[pos + 7]]) as usize;
            (len, 8usize)
        };
        let start = pos + header_len;
        let end = match start.checked_add(len) {
            Some(e) if e <= bytes.len() => e,
            _ => {
                if tag == TAG_PIXEL_DATA {
                    return Err(DicomError::TruncatedPixelData);
                }
                break; // unreadable tail
            }
        };
        out.push((
            tag,
            Element {
                vr,
                value: &bytes[start..end],
            },
        ));
        pos = end;
    }
    Ok(out)
}

fn find<'a>(elements: &'a [(Tag, Element<'a>)], tag: Tag) -> Option<&'a Element<'a>> {
    // last occurrence wins
    elements.iter().rev().find(|(t, _)| *t == tag).map(|(_, e)| e)
}

/// Strip DICOM padding (trailing NUL for UI, spaces elsewhere).
fn string_value(e: &Element) -> Option<String> {
    let s = std::str::from_utf8(e.value).ok()?;
    let s = s.trim_end_matches(['\0', ' ']).trim_start_matches(' ');
    if s.is_empty() {
        None
    } else {
        Some(s.to_string())
    }
}

fn us_value(e: &Element) -> Option<u16> {
    if e.vr != *b"US" || e.value.len() != 2 {
        return None;
    }
    Some(u16::from_le_bytes([e.value[0], e.value[1]]))
}

fn is_value(e: &Element) -> Option<i32> {
    string_value(e)?.parse().ok()
}

fn ds_value(e: &Element) -> Option<f64> {
    let v: f64 = string_value(e)?.parse().ok()?;
    v.is_finite().then_some(v)
}

fn ds_multi_value<const N: usize>(e: &Element) -> Option<[f64; N]> {
    let s = string_value(e)?;
    let mut out = [0.0; N];
    let mut n = 0;
    for part in s.split('\\') {
        if n >= N {
            return None;
        }
        let v: f64 = part.trim().parse().ok()?;
        if !v.is_finite() {
            return None;
        }
        out[n] = v;
        n += 1;
    }
    (n == N).then_some(out)
}

/// Parse one slice file. Every failure mode is one of the corrupted-file
/// error classes; this function never panics on arbitrary bytes.
pub fn parse_file(bytes: &[u8]) -> Result<(DicomHeader, RawPixels), DicomError> {
    if bytes.len() < 132 || &bytes[128..132] != b"DICM" {
        return Err(DicomError::MissingMagic);
    }
    let elements = scan_elements(bytes)?;

    for tag in REQUIRED {
        if find(&elements, tag).is_none() {
            return Err(DicomError::MissingRequiredTag(tag));
        }
    }
    // A required tag whose value cannot be decoded counts as missing.
    let required = |tag: Tag| find(&elements, tag).expect("presence checked");
    let modality = string_value(required(TAG_MODALITY))
        .ok_or(DicomError::MissingRequiredTag(TAG_MODALITY))?;
    let study_uid = string_value(required(TAG_STUDY_UID))
        .ok_or(DicomError::MissingRequiredTag(TAG_STUDY_UID))?;
    let series_uid = string_value(required(TAG_SERIES_UID))
        .ok_or(DicomError::MissingRequiredTag(TAG_SERIES_UID))?;
    let instance_number = is_value(required(TAG_INSTANCE_NUMBER))
        .ok_or(DicomError::MissingRequiredTag(TAG_INSTANCE_NUMBER))?;
    let image_orientation = ds_multi_value::<6>(required(TAG_IMAGE_ORIENTATION))
        .ok_or(DicomError::MissingRequiredTag(TAG_IMAGE_ORIENTATION))?;
    let rows = us_value(required(TAG_ROWS)).ok_or(DicomError::MissingRequiredTag(TAG_ROWS))?;
    let cols = us_value(required(TAG_COLS)).ok_or(DicomError::MissingRequiredTag(TAG_COLS))?;
    let bits_allocated = us_value(required(TAG_BITS_ALLOCATED))
        .ok_or(DicomError::MissingRequiredTag(TAG_BITS_ALLOCATED))?;
    let rescale_intercept = ds_value(required(TAG_RESCALE_INTERCEPT))
        .ok_or(DicomError::MissingRequiredTag(TAG_RESCALE_INTERCEPT))?;
    let rescale_slope = ds_value(required(TAG_RESCALE_SLOPE))
        .ok_or(DicomError::MissingRequiredTag(TAG_RESCALE_SLOPE))?;

    let header = DicomHeader {
        modality,
        study_uid,
        series_uid,
        instance_number,
        image_orientation,
        rows,
        cols,
        bits_allocated,
        rescale_slope,
        rescale_intercept,
    };
    match header.validate() {
        Ok(()) => {}
        // Structural header invariants broken by bad values: the offending
        // tag is effectively absent.
        Err(_) if header.rows == 0 => return Err(DicomError::MissingRequiredTag(TAG_ROWS)),
        Err(_) if header.cols == 0 => return Err(DicomError::MissingRequiredTag(TAG_COLS)),
        Err(_) if header.bits_allocated != 8 && header.bits_allocated != 16 => {
            return Err(DicomError::MissingRequiredTag(TAG_BITS_ALLOCATED))
        }
        Err(_) if header.rescale_slope == 0.0 => {
            return Err(DicomError::MissingRequiredTag(TAG_RESCALE_SLOPE))
        }
        Err(_) => return Err(DicomError::MissingRequiredTag(TAG_IMAGE_ORIENTATION)),
    }

    let pixel = required(TAG_PIXEL_DATA);
    let n = header.rows as usize * header.cols as usize;
    let data = match (header.bits_allocated, &pixel.vr) {
        (16, b"OW") => {
            if pixel.value.len() != 2 * n {
                return Err(DicomError::TruncatedPixelData);
            }
            pixel
                .value
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect()
        }
        (8, b"OB") => {
            if pixel.value.len() != n {
                return Err(DicomError::TruncatedPixelData);
            }
            pixel.value.iter().map(|&b| b as u16).collect()
        }
        _ => return Err(DicomError::UnsupportedTransferSyntax),
    };
    let pixels = RawPixels {
        rows: header.rows as usize,
        cols: header.cols as usize,
        data,
    };
    Ok((header, pixels))
}

// ---------------------------------------------------------------------------
// writing
// ---------------------------------------------------------------------------

fn push_short(out: &mut Vec<u8>, tag: Tag, vr: &[u8; 2], value: &[u8]) {
    debug_assert!(value.len() % 2 == 0 && value.len() <= u16::MAX as usize);
    out.extend_from_slice(&tag.0.to_le_bytes());
    out.extend_from_slice(&tag.1.to_le_bytes());
    out.extend_from_slice(vr);
    out.extend_from_slice(&(value.len() as u16).to_le_bytes());
    out.extend_from_slice(value);
}

fn push_long(out: &mut Vec<u8>, tag: Tag, vr: &[u8; 2], value: &[u8]) {
    debug_assert!(value.len() % 2 == 0);
    out.extend_from_slice(&tag.0.to_le_bytes());
    out.extend_from_slice(&tag.1.to_le_bytes());
    out.extend_from_slice(vr);
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    out.extend_from_slice(value);
}

fn padded(s: &str, pad: u8) -> Vec<u8> {
    let mut v = s.as_bytes().to_vec();
    if v.len() % 2 != 0 {
        v.push(pad);
    }
    v
}

/// Shortest decimal form that parses back to the same f64.
fn ds(v: f64) -> String {
    format!("{v}")
}

/// Emit a file [`parse_file`] accepts; `parse(write(h, p)) == (h, p)`.
pub fn write_file(header: &DicomHeader, pixels: &RawPixels) -> Result<Vec<u8>, DicomError> {
    header.validate()?;
    if pixels.rows != header.rows as usize || pixels.cols != header.cols as usize {
        return Err(DicomError::InvalidHeader("pixel matrix shape differs from header".into()));
    }
    if pixels.data.len() != pixels.rows * pixels.cols {
        return Err(DicomError::InvalidHeader("pixel data length differs from rows*cols".into()));
    }
    if header.bits_allocated == 8 && pixels.data.iter().any(|&v| v > 0xFF) {
        return Err(DicomError::InvalidHeader("8-bit file holds values above 255".into()));
    }

    let mut out = vec![0u8; 128];
    out.extend_from_slice(b"DICM");
    push_short(&mut out, TAG_MODALITY, b"CS", &padded(&header.modality, b' '));
    push_short(&mut out, TAG_STUDY_UID, b"UI", &padded(&header.study_uid, 0));
    push_short(&mut out, TAG_SERIES_UID, b"UI", &padded(&header.series_uid, 0));
    push_short(
        &mut out,
        TAG_INSTANCE_NUMBER,
        b"IS",
        &padded(&header.instance_number.to_string(), b' '),
    );
    let orientation = header
        .image_orientation
        .iter()
        .map(|&v| ds(v))
        .collect::<Vec<_>>()
        .join("\\");
    push_short(&mut out, TAG_IMAGE_ORIENTATION, b"DS", &padded(&orientation, b' '));
    push_short(&mut out, TAG_ROWS, b"US", &header.rows.to_le_bytes());
    push_short(&mut out, TAG_COLS, b"US", &header.cols.to_le_bytes());
    push_short(&mut out, TAG_BITS_ALLOCATED, b"US", &header.bits_allocated.to_le_bytes());
    push_short(
        &mut out,
        TAG_RESCALE_INTERCEPT,
        b"DS",
        &padded(&ds(header.rescale_intercept), b' '),
    );
    push_short(
        &mut out,
        TAG_RESCALE_SLOPE,
        b"DS",
        &padded(&ds(header.rescale_slope), b' '),
    );
    if header.bits_allocated == 16 {
        let mut payload = Vec::with_capacity(pixels.data.len() * 2);
        for &v in &pixels.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        push_long(&mut out, TAG_PIXEL_DATA, b"OW", &payload);
    } else {
        let payload: Vec<u8> = pixels.data.iter().map(|&v| v as u8).collect();
        // OB payloads must stay even-length; rows*cols is validated above, so
        // pad only when the image has an odd pixel count.
        if payload.len() % 2 == 0 {
            push_long(&mut out, TAG_PIXEL_DATA, b"OB", &payload);
        } else {
            return Err(DicomError::InvalidHeader(
                "8-bit images need an even pixel count".into(),
            ));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// geometry + HU
// ---------------------------------------------------------------------------

/// True iff the slice normal is within ~25 degrees of the patient z-axis.
pub fn is_axial(orientation: &[f64; 6]) -> Result<bool, DicomError> {
    if !unit_norm(&orientation[..3]) || !unit_norm(&orientation[3..]) {
        return Err(DicomError::NotUnitOrientation);
    }
    let r = &orientation[..3];
    let c = &orientation[3..];
    let normal_z = r[0] * c[1] - r[1] * c[0];
    Ok(normal_z.abs() > AXIAL_NORMAL_MIN)
}

/// `HU = slope * raw + intercept`, clamped to the sanity window.
pub fn to_hounsfield(raw: &RawPixels, slope: f64, intercept: f64) -> Result<Vec<f32>, DicomError> {
    if slope == 0.0 {
        return Err(DicomError::ZeroSlope);
    }
    Ok(raw
        .data
        .iter()
        .map(|&v| ((slope * v as f64 + intercept) as f32).clamp(HU_MIN, HU_MAX))
        .collect())
}

/// Assemble parsed slices into a study volume.
///
/// Non-CT and non-axial slices are dropped (their count is returned); the
/// remainder must agree on study uid and shape.
pub fn assemble_study(
    files: Vec<(DicomHeader, RawPixels)>,
) -> Result<(HuVolume, usize), DicomError> {
    let mut kept: Vec<(DicomHeader, RawPixels)> = Vec::new();
    let mut excluded = 0usize;
    for (h, p) in files {
        let axial = matches!(is_axial(&h.image_orientation), Ok(true));
        if h.modality == "CT" && axial {
            kept.push((h, p));
        } else {
            excluded += 1;
        }
    }
    if kept.is_empty() {
        return Err(DicomError::EmptyStudy);
    }
    let study_uid = kept[0].0.study_uid.clone();
    if kept.iter().any(|(h, _)| h.study_uid != study_uid) {
        return Err(DicomError::MixedStudyUids);
    }
    let (rows, cols) = (kept[0].1.rows, kept[0].1.cols);
    if kept.iter().any(|(_, p)| p.rows != rows || p.cols != cols) {
        return Err(DicomError::ShapeMismatch);
    }
    kept.sort_by_key(|(h, _)| h.instance_number);
    let mut slices = Vec::with_capacity(kept.len());
    for (h, p) in &kept {
        slices.push(to_hounsfield(p, h.rescale_slope, h.rescale_intercept)?);
    }
    Ok((
        HuVolume {
            study_uid,
            rows,
            cols,
            slices,
        },
        excluded,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn sample_header() -> DicomHeader {
        DicomHeader {
            modality: "CT".into(),
            study_uid: "2.25.4711".into(),
            series_uid: "2.25.4711.1".into(),
            instance_number: 3,
            image_orientation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            rows: 2,
            cols: 2,
            bits_allocated: 16,
            rescale_slope: 1.0,
            rescale_intercept: -1024.0,
        }
    }

    fn sample_pixels() -> RawPixels {
        RawPixels {
            rows: 2,
            cols: 2,
            data: vec![0, 24, 1024, 4095],
        }
    }

    #[test]
    fn minimal_image_round_trips_bit_exactly() {
        let (h, p) = (sample_header(), sample_pixels());
        let bytes = write_file(&h, &p).unwrap();
        let (h2, p2) = parse_file(&bytes).unwrap();
        assert_eq!(h, h2);
        assert_eq!(p, p2);
    }

    #[test]
    fn sixteen_bit_payload_is_two_bytes_per_pixel() {
        let (h, p) = (sample_header(), sample_pixels());
        let bytes = write_file(&h, &p).unwrap();
        // pixel record is last: 12-byte header + payload of 2*rows*cols
        let len_at = bytes.len() - 2 * 2 * 2 - 4;
        let payload_len =
            u32::from_le_bytes(bytes[len_at..len_at + 4].try_into().unwrap()) as usize;
        assert_eq!(payload_len, 2 * 2 * 2);
    }

    #[test]
    fn zero_rows_is_rejected_on_write() {
        let mut h = sample_header();
        h.rows = 0;
        assert!(matches!(
            write_file(&h, &sample_pixels()),
            Err(DicomError::InvalidHeader(_))
        ));
    }

    #[test]
    fn missing_magic_is_detected() {
        let mut bytes = write_file(&sample_header(), &sample_pixels()).unwrap();
        bytes[129] ^= 0xFF;
        assert_eq!(parse_file(&bytes), Err(DicomError::MissingMagic));
        assert_eq!(parse_file(&[0u8; 64]), Err(DicomError::MissingMagic));
    }

    #[test]
    fn overlong_pixel_length_is_truncated_pixel_data() {
        let mut bytes = write_file(&sample_header(), &sample_pixels()).unwrap();
        // pixel record: ...[vr OW][00 00][len u32][payload 8]; bump len
        let len_at = bytes.len() - 8 - 4;
        bytes[len_at] = 0xFF;
        assert_eq!(parse_file(&bytes), Err(DicomError::TruncatedPixelData));
    }

    #[test]
    fn payload_shape_mismatch_is_truncated_pixel_data() {
        let h = sample_header();
        let bytes = write_file(&h, &sample_pixels()).unwrap();
        // Corrupt the Rows value (US, little endian) from 2 to 3.
        let needle = [0x28, 0x00, 0x10, 0x00, b'U', b'S', 2, 0, 2, 0];
        let at = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        let mut bytes = bytes;
        bytes[at + 8] = 3;
        assert_eq!(parse_file(&bytes), Err(DicomError::TruncatedPixelData));
    }

    #[test]
    fn unknown_vr_is_unsupported_syntax() {
        let mut bytes = write_file(&sample_header(), &sample_pixels()).unwrap();
        bytes[136] = b'q'; // first record's VR
        assert_eq!(parse_file(&bytes), Err(DicomError::UnsupportedTransferSyntax));
    }

    #[test]
    fn axial_orientations() {
        assert!(is_axial(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        assert!(!is_axial(&[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
        // tilt 10 degrees about x: col = (0, cos, sin); normal.z = cos(10?)
        let t = 10f64.to_radians();
        let tilted = [1.0, 0.0, 0.0, 0.0, t.cos(), t.sin()];
        let r = &tilted[..3];
        let c = &tilted[3..];
        let normal = [
            r[1] * c[2] - r[2] * c[1],
            r[2] * c[0] - r[0] * c[2],
            r[0] * c[1] - r[1] * c[0],
        ];
        assert!((normal[2] - t.cos()).abs() < 1e-12);
        assert!(is_axial(&tilted).unwrap());
        assert_eq!(
            is_axial(&[2.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            Err(DicomError::NotUnitOrientation)
        );
    }

    #[test]
    fn axial_is_invariant_to_swapping_row_and_col() {
        let t = 10f64.to_radians();
        let o = [1.0, 0.0, 0.0, 0.0, t.cos(), t.sin()];
        let swapped = [0.0, t.cos(), t.sin(), 1.0, 0.0, 0.0];
        assert_eq!(is_axial(&o).unwrap(), is_axial(&swapped).unwrap());
    }

    #[test]
    fn hounsfield_scale_reference_points() {
        let raw = |v: u16| RawPixels {
            rows: 1,
            cols: 1,
            data: vec![v],
        };
        assert_eq!(to_hounsfield(&raw(1024), 1.0, -1024.0).unwrap()[0], 0.0);
        assert_eq!(to_hounsfield(&raw(24), 1.0, -1024.0).unwrap()[0], -1000.0);
        assert_eq!(to_hounsfield(&raw(2048), 0.5, -1000.0).unwrap()[0], 24.0);
        assert_eq!(to_hounsfield(&raw(0), 0.0, 0.0), Err(DicomError::ZeroSlope));
        // clamp
        assert_eq!(to_hounsfield(&raw(65535), 1.0, 0.0).unwrap()[0], HU_MAX);
    }

    fn slice_with(instance: i32, orientation: [f64; 6], uid: &str) -> (DicomHeader, RawPixels) {
        let mut h = sample_header();
        h.instance_number = instance;
        h.image_orientation = orientation;
        h.study_uid = uid.into();
        (h, sample_pixels())
    }

    const AX: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    const COR: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0];

    #[test]
    fn assemble_sorts_by_instance_number() {
        let files = vec![
            slice_with(3, AX, "u"),
            slice_with(1, AX, "u"),
            slice_with(2, AX, "u"),
        ];
        let (vol, excluded) = assemble_study(files).unwrap();
        assert_eq!(excluded, 0);
        assert_eq!(vol.slices.len(), 3);
    }

    #[test]
    fn assemble_drops_non_axial_and_counts() {
        let files = vec![slice_with(1, AX, "u"), slice_with(2, COR, "u")];
        let (vol, excluded) = assemble_study(files).unwrap();
        assert_eq!(vol.slices.len(), 1);
        assert_eq!(excluded, 1);
    }

    #[test]
    fn assemble_rejects_mixed_uids_and_empty() {
        let files = vec![slice_with(1, AX, "a"), slice_with(2, AX, "b")];
        assert_eq!(assemble_study(files).unwrap_err(), DicomError::MixedStudyUids);
        let files = vec![slice_with(1, COR, "a")];
        assert_eq!(assemble_study(files).unwrap_err(), DicomError::EmptyStudy);
    }

    proptest! {
        /// Write-parse identity over random headers and pixel matrices.
        #[test]
        fn round_trip_identity(
            rows in 1u16..6,
            cols in 1u16..6,
            instance in -500i32..500,
            slope in prop::sample::select(vec![0.5f64, 1.0, 2.0]),
            intercept in -2000.0f64..2000.0,
            seed in any::<u64>(),
        ) {
            let n = rows as usize * cols as usize;
            let mut h = sample_header();
            h.rows = rows;
            h.cols = cols;
            h.instance_number = instance;
            h.rescale_slope = slope;
            h.rescale_intercept = intercept;
            let data: Vec<u16> = (0..n).map(|i| ((seed >> (i % 48)) & 0xFFF) as u16).collect();
            let p = RawPixels { rows: n / cols as usize, cols: cols as usize, data };
            let bytes = write_file(&h, &p).unwrap();
            let (h2, p2) = parse_file(&bytes).unwrap();
            prop_assert_eq!(h, h2);
            prop_assert_eq!(p, p2);
        }

        /// Byte mutations may fail to parse but never panic and never change
        /// the error beyond the enumerated corruption classes.
        #[test]
        fn mutated_files_error_cleanly(at in 0usize..1000, val in any::<u8>()) {
            let mut bytes = write_file(&sample_header(), &sample_pixels()).unwrap();
            let at = at % bytes.len();
            bytes[at] = val;
            let _ = parse_file(&bytes); // must not panic
        }
    }
}
