//! Synthetic CT-like volumes: phantom generation, volume file I/O, slicing
//! into the three anatomical views, intensity preprocessing, and resizing.

mod io;
mod phantom;

pub use io::{read_label, read_volume, write_label, write_volume, VolumeFileError};
pub use phantom::{generate_phantom, PhantomConfig, PhantomError, BACKGROUND_HU};

use thiserror::Error;

use crate::geometry::{MaskSlice, Window};
use crate::scalar::Scalar;

/// Valid CT-like intensity range, in Hounsfield-like units.
pub const HU_MIN: i16 = -1024;
pub const HU_MAX: i16 = 3071;

/// Intensities are clipped to this band before 8-bit rescaling.
pub const CLIP_LO: i16 = -100;
pub const CLIP_HI: i16 = 240;

#[derive(Debug, Error)]
pub enum SynthDataError {
    #[error("volume data length {got} does not match {w}x{h}x{d}")]
    VolumeLengthMismatch { w: u32, h: u32, d: u32, got: usize },
    #[error("intensity {0} outside [{HU_MIN}, {HU_MAX}]")]
    IntensityOutOfRange(i16),
    #[error("label values must be 0 or 1")]
    NonBinaryLabel,
    #[error("slice {index} has dims {got_w}x{got_h}, expected {want_w}x{want_h}")]
    InconsistentSlice { index: usize, want_w: u32, want_h: u32, got_w: u32, got_h: u32 },
    #[error("cannot repile an empty slice sequence")]
    NoSlices,
}

/// 3D scalar grid of CT-like intensities, stored x-fastest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Volume {
    width: u32,
    height: u32,
    depth: u32,
    data: Vec<i16>,
}

impl Volume {
    pub fn filled(width: u32, height: u32, depth: u32, v: i16) -> Self {
        Self { width, height, depth, data: vec![v; (width * height * depth) as usize] }
    }

    pub fn from_raw(width: u32, height: u32, depth: u32, data: Vec<i16>) -> Result<Self, SynthDataError> {
        if data.len() != (width as usize) * (height as usize) * (depth as usize) {
            return Err(SynthDataError::VolumeLengthMismatch { w: width, h: height, d: depth, got: data.len() });
        }
        if let Some(&v) = data.iter().find(|&&v| !(HU_MIN..=HU_MAX).contains(&v)) {
            return Err(SynthDataError::IntensityOutOfRange(v));
        }
        Ok(Self { width, height, depth, data })
    }

    pub fn dims(&self) -> (u32, u32, u32) {
        (self.width, self.height, self.depth)
    }

    pub fn data(&self) -> &[i16] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, z: u32) -> i16 {
        self.data[((z * self.height + y) * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, z: u32, v: i16) {
        self.data[((z * self.height + y) * self.width + x) as usize] = v;
    }
}

/// Binary ground-truth volume paired with a [`Volume`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    width: u32,
    height: u32,
    depth: u32,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn zeros(width: u32, height: u32, depth: u32) -> Self {
        Self { width, height, depth, data: vec![0; (width * height * depth) as usize] }
    }

    pub fn from_raw(width: u32, height: u32, depth: u32, data: Vec<u8>) -> Result<Self, SynthDataError> {
        if data.len() != (width as usize) * (height as usize) * (depth as usize) {
            return Err(SynthDataError::VolumeLengthMismatch { w: width, h: height, d: depth, got: data.len() });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(SynthDataError::NonBinaryLabel);
        }
        Ok(Self { width, height, depth, data })
    }

    pub fn dims(&self) -> (u32, u32, u32) {
        (self.width, self.height, self.depth)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, z: u32) -> u8 {
        self.data[((z * self.height + y) * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, z: u32, v: bool) {
        self.data[((z * self.height + y) * self.width + x) as usize] = v as u8;
    }

    pub fn foreground_count(&self) -> u64 {
        self.data.iter().map(|&v| v as u64).sum()
    }

    /// Foreground fraction of each axial slice, indexed by z.
    pub fn axial_slice_fractions(&self) -> Vec<f64> {
        let plane = (self.width * self.height) as usize;
        (0..self.depth as usize)
            .map(|z| {
                let fg: u64 = self.data[z * plane..(z + 1) * plane].iter().map(|&v| v as u64).sum();
                fg as f64 / plane as f64
            })
            .collect()
    }
}

/// The three slicing directions. Sagittal slices along W, coronal along H,
/// axial along D.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ViewAxis {
    Sagittal,
    Coronal,
    Axial,
}

impl ViewAxis {
    pub const ALL: [ViewAxis; 3] = [ViewAxis::Sagittal, ViewAxis::Coronal, ViewAxis::Axial];

    pub fn name(self) -> &'static str {
        match self {
            ViewAxis::Sagittal => "sagittal",
            ViewAxis::Coronal => "coronal",
            ViewAxis::Axial => "axial",
        }
    }

    pub fn from_name(s: &str) -> Option<ViewAxis> {
        match s {
            "sagittal" => Some(ViewAxis::Sagittal),
            "coronal" => Some(ViewAxis::Coronal),
            "axial" => Some(ViewAxis::Axial),
            _ => None,
        }
    }

    /// Number of slices this axis produces from a (W,H,D) volume.
    pub fn slice_count(self, dims: (u32, u32, u32)) -> u32 {
        match self {
            ViewAxis::Sagittal => dims.0,
            ViewAxis::Coronal => dims.1,
            ViewAxis::Axial => dims.2,
        }
    }

    /// (width, height) of one slice of a (W,H,D) volume.
    pub fn slice_dims(self, dims: (u32, u32, u32)) -> (u32, u32) {
        match self {
            ViewAxis::Sagittal => (dims.1, dims.2),
            ViewAxis::Coronal => (dims.0, dims.2),
            ViewAxis::Axial => (dims.0, dims.1),
        }
    }

    /// Map slice-local (u, v) at slice index i back to volume (x, y, z).
    #[inline]
    pub fn to_volume_coords(self, i: u32, u: u32, v: u32) -> (u32, u32, u32) {
        match self {
            ViewAxis::Sagittal => (i, u, v),
            ViewAxis::Coronal => (u, i, v),
            ViewAxis::Axial => (u, v, i),
        }
    }
}

/// Signed-intensity 2D slice extracted from a volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntensitySlice {
    pub width: u32,
    pub height: u32,
    pub data: Vec<i16>,
}

/// 8-bit single-channel image, the network-facing slice format.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl SliceImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), (width * height) as usize);
        Self { width, height, data }
    }

    pub fn filled(width: u32, height: u32, v: u8) -> Self {
        Self { width, height, data: vec![v; (width * height) as usize] }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[(y * self.width + x) as usize]
    }

    pub fn crop(&self, win: &Window) -> SliceImage {
        assert!(win.fits_in(self.width, self.height), "crop window outside image");
        let mut data = Vec::with_capacity((win.w * win.h) as usize);
        for y in win.y0..win.bottom() {
            let row = (y * self.width) as usize;
            data.extend_from_slice(&self.data[row + win.x0 as usize..row + win.right() as usize]);
        }
        SliceImage::new(win.w, win.h, data)
    }

    /// Bilinear resize through the scalar type, rounded half-up back to u8.
    pub fn resize(&self, out_w: u32, out_h: u32) -> SliceImage {
        if out_w == self.width && out_h == self.height {
            return self.clone();
        }
        let grid: Vec<f32> = self.data.iter().map(|&v| v as f32).collect();
        let resized = resize_bilinear(&grid, self.width, self.height, out_w, out_h);
        let data = resized.iter().map(|&v| (v + 0.5).floor().clamp(0.0, 255.0) as u8).collect();
        SliceImage::new(out_w, out_h, data)
    }

    /// Pixels scaled to [0, 1] in the working scalar type.
    pub fn to_unit<S: Scalar>(&self) -> Vec<S> {
        let inv = S::from_f64(1.0 / 255.0).unwrap();
        self.data.iter().map(|&v| S::from_u8(v).unwrap() * inv).collect()
    }
}

/// Clip to [-100, 240] and rescale linearly to [0, 255], rounding half-up.
/// Exact integer arithmetic: the scale factor 255/340 is exactly 3/4.
pub fn clip_rescale(slice: &IntensitySlice) -> SliceImage {
    let data = slice
        .data
        .iter()
        .map(|&v| {
            let c = v.clamp(CLIP_LO, CLIP_HI) as i32 - CLIP_LO as i32;
            ((3 * c + 2) / 4) as u8
        })
        .collect();
    SliceImage::new(slice.width, slice.height, data)
}

/// Inverse endpoints of [`clip_rescale`]: 0 maps back to the clip floor and
/// 255 to the clip ceiling. The scale 340/255 is exactly 4/3; rounds half-up.
pub fn rescale_to_intensity(v: u8) -> i16 {
    CLIP_LO + ((8 * v as i32 + 3) / 6) as i16
}

fn slice_axis_generic<T: Copy>(
    dims: (u32, u32, u32),
    data: &[T],
    axis: ViewAxis,
) -> Vec<(u32, u32, Vec<T>)> {
    let (sw, sh) = axis.slice_dims(dims);
    let (w, h) = (dims.0 as usize, dims.1 as usize);
    (0..axis.slice_count(dims))
        .map(|i| {
            let mut out = Vec::with_capacity((sw * sh) as usize);
            for v in 0..sh {
                for u in 0..sw {
                    let (x, y, z) = axis.to_volume_coords(i, u, v);
                    out.push(data[(z as usize * h + y as usize) * w + x as usize]);
                }
            }
            (sw, sh, out)
        })
        .collect()
}

fn repile_axis_generic<T: Copy + Default>(
    axis: ViewAxis,
    slices: &[(u32, u32, &[T])],
) -> Result<((u32, u32, u32), Vec<T>), SynthDataError> {
    let (sw, sh) = match slices.first() {
        Some(&(w, h, _)) => (w, h),
        None => return Err(SynthDataError::NoSlices),
    };
    for (i, &(w, h, _)) in slices.iter().enumerate() {
        if w != sw || h != sh {
            return Err(SynthDataError::InconsistentSlice {
                index: i,
                want_w: sw,
                want_h: sh,
                got_w: w,
                got_h: h,
            });
        }
    }
    let n = slices.len() as u32;
    let dims = match axis {
        ViewAxis::Sagittal => (n, sw, sh),
        ViewAxis::Coronal => (sw, n, sh),
        ViewAxis::Axial => (sw, sh, n),
    };
    let (w, h) = (dims.0 as usize, dims.1 as usize);
    let mut data = vec![T::default(); w * h * dims.2 as usize];
    for (i, &(_, _, sdata)) in slices.iter().enumerate() {
        for v in 0..sh {
            for u in 0..sw {
                let (x, y, z) = axis.to_volume_coords(i as u32, u, v);
                data[(z as usize * h + y as usize) * w + x as usize] = sdata[(v * sw + u) as usize];
            }
        }
    }
    Ok((dims, data))
}

/// Slice a volume along the given view axis, ascending slice index.
pub fn slice_view(vol: &Volume, axis: ViewAxis) -> Vec<IntensitySlice> {
    slice_axis_generic(vol.dims(), vol.data(), axis)
        .into_iter()
        .map(|(w, h, data)| IntensitySlice { width: w, height: h, data })
        .collect()
}

/// Stack intensity slices back into a volume; exact inverse of [`slice_view`].
pub fn repile_view(slices: &[IntensitySlice], axis: ViewAxis) -> Result<Volume, SynthDataError> {
    let refs: Vec<(u32, u32, &[i16])> =
        slices.iter().map(|s| (s.width, s.height, s.data.as_slice())).collect();
    let (dims, data) = repile_axis_generic(axis, &refs)?;
    Ok(Volume { width: dims.0, height: dims.1, depth: dims.2, data })
}

/// Slice a label volume into per-view binary masks.
pub fn slice_view_label(label: &LabelVolume, axis: ViewAxis) -> Vec<MaskSlice> {
    slice_axis_generic(label.dims(), label.data(), axis)
        .into_iter()
        .map(|(w, h, data)| MaskSlice::from_raw(w, h, data).expect("label slices are binary"))
        .collect()
}

/// Stack binary masks back into a label volume.
pub fn repile_view_label(masks: &[MaskSlice], axis: ViewAxis) -> Result<LabelVolume, SynthDataError> {
    let refs: Vec<(u32, u32, &[u8])> =
        masks.iter().map(|m| (m.width(), m.height(), m.data())).collect();
    let (dims, data) = repile_axis_generic(axis, &refs)?;
    Ok(LabelVolume { width: dims.0, height: dims.1, depth: dims.2, data })
}

/// Corner-aligned bilinear resize of a row-major grid. Identity when the
/// output dims equal the input dims.
pub fn resize_bilinear<S: Scalar>(input: &[S], in_w: u32, in_h: u32, out_w: u32, out_h: u32) -> Vec<S> {
    assert!(in_w >= 1 && in_h >= 1 && out_w >= 1 && out_h >= 1);
    assert_eq!(input.len(), (in_w * in_h) as usize);
    let scale = |out_dim: u32, in_dim: u32, o: u32| -> f64 {
        if out_dim == 1 {
            0.0
        } else {
            o as f64 * (in_dim as f64 - 1.0) / (out_dim as f64 - 1.0)
        }
    };
    let mut out = Vec::with_capacity((out_w * out_h) as usize);
    for oy in 0..out_h {
        let sy = scale(out_h, in_h, oy);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(in_h as usize - 1);
        let fy = S::from_f64(sy - y0 as f64).unwrap();
        for ox in 0..out_w {
            let sx = scale(out_w, in_w, ox);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(in_w as usize - 1);
            let fx = S::from_f64(sx - x0 as f64).unwrap();
            let one = S::one();
            let v00 = input[y0 * in_w as usize + x0];
            let v01 = input[y0 * in_w as usize + x1];
            let v10 = input[y1 * in_w as usize + x0];
            let v11 = input[y1 * in_w as usize + x1];
            let top = v00 * (one - fx) + v01 * fx;
            let bot = v10 * (one - fx) + v11 * fx;
            out.push(top * (one - fy) + bot * fy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_rescale_endpoints_and_midpoint() {
        let s = IntensitySlice { width: 3, height: 1, data: vec![-150, 240, 70] };
        let img = clip_rescale(&s);
        // -150 clips to the floor, 240 is the ceiling, and
        // (70+100)/340*255 = 127.5 rounds half-up to 128.
        assert_eq!(img.data(), &[0, 255, 128]);
    }

    #[test]
    fn clip_rescale_monotone_and_in_range() {
        let data: Vec<i16> = (-1024..=3071).step_by(7).collect();
        let s = IntensitySlice { width: data.len() as u32, height: 1, data };
        let img = clip_rescale(&s);
        for pair in img.data().windows(2) {
            assert!(pair[0] <= pair[1]);
        }
    }

    #[test]
    fn rescale_endpoints_invert() {
        assert_eq!(rescale_to_intensity(0), CLIP_LO);
        assert_eq!(rescale_to_intensity(255), CLIP_HI);
    }

    #[test]
    fn axial_slicing_shape() {
        let vol = Volume::filled(64, 64, 64, 10);
        let slices = slice_view(&vol, ViewAxis::Axial);
        assert_eq!(slices.len(), 64);
        assert!(slices.iter().all(|s| s.width == 64 && s.height == 64));
    }

    #[test]
    fn sagittal_axis_mapping() {
        let vol = Volume::filled(10, 20, 30, 0);
        let slices = slice_view(&vol, ViewAxis::Sagittal);
        assert_eq!(slices.len(), 10);
        assert!(slices.iter().all(|s| s.width == 20 && s.height == 30));
    }

    #[test]
    fn slice_then_repile_roundtrips_every_axis() {
        let mut vol = Volume::filled(6, 7, 8, 0);
        for z in 0..8 {
            for y in 0..7 {
                for x in 0..6 {
                    vol.set(x, y, z, (x * 100 + y * 10 + z) as i16);
                }
            }
        }
        for axis in ViewAxis::ALL {
            let back = repile_view(&slice_view(&vol, axis), axis).unwrap();
            assert_eq!(back, vol, "axis {axis:?}");
        }
    }

    #[test]
    fn label_slicing_roundtrips() {
        let mut label = LabelVolume::zeros(5, 6, 7);
        label.set(1, 2, 3, true);
        label.set(4, 5, 6, true);
        for axis in ViewAxis::ALL {
            let back = repile_view_label(&slice_view_label(&label, axis), axis).unwrap();
            assert_eq!(back, label, "axis {axis:?}");
        }
    }

    #[test]
    fn resize_identity_dims() {
        let grid: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let out = resize_bilinear(&grid, 4, 3, 4, 3);
        assert_eq!(out, grid);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let grid = vec![5.0f64; 9];
        let out = resize_bilinear(&grid, 3, 3, 7, 5);
        assert!(out.iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn resize_2x2_to_3x3_center_is_midpoint() {
        // Bilinear at (0.5, 0.5) of [[0,2],[2,4]] = (0+2+2+4)/4 = 2.
        let grid = vec![0.0f64, 2.0, 2.0, 4.0];
        let out = resize_bilinear(&grid, 2, 2, 3, 3);
        assert_eq!(out[4], 2.0);
        // Corners align exactly.
        assert_eq!(out[0], 0.0);
        assert_eq!(out[8], 4.0);
    }

    #[test]
    fn crop_extracts_subrect() {
        let img = SliceImage::new(4, 3, (0..12).collect());
        let c = img.crop(&Window::new(1, 1, 2, 2));
        assert_eq!(c.data(), &[5, 6, 9, 10]);
    }

    #[test]
    fn repile_rejects_inconsistent_slices() {
        let a = IntensitySlice { width: 2, height: 2, data: vec![0; 4] };
        let b = IntensitySlice { width: 3, height: 2, data: vec![0; 6] };
        assert!(repile_view(&[a, b], ViewAxis::Axial).is_err());
    }
}
