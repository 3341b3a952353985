//! Window arithmetic for the localization MDP.
//!
//! Everything here is pure integer-pixel geometry: the ten agent actions,
//! mask-based modified IoU (window vs. ground-truth *mask*, not its bounding
//! box), recall, and the box dilation used before cropping for segmentation.
//!
//! Rounding convention: origins round by flooring, sizes round half-up. Zoom
//! actions are anchored at the named corner; the fifth zoom preserves the
//! window center (rounding toward the top-left). Shifts and zooms clamp to
//! the image instead of failing, so the agent may press against borders.

use thiserror::Error;

/// Smallest window side a zoom may produce, in pixels.
pub const DEFAULT_MIN_WINDOW_SIDE: u32 = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("trigger action has no geometric effect")]
    TriggerHasNoGeometry,
    #[error("window ({0:?}) not contained in {1}x{2} image")]
    WindowOutsideImage(Window, u32, u32),
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("mask data length {got} does not match {width}x{height}")]
    MaskLengthMismatch { width: u32, height: u32, got: usize },
    #[error("mask values must be 0 or 1")]
    NonBinaryMask,
}

/// Axis-aligned integer-pixel rectangle: the agent's attention region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Window {
    pub x0: u32,
    pub y0: u32,
    pub w: u32,
    pub h: u32,
}

impl Window {
    pub fn new(x0: u32, y0: u32, w: u32, h: u32) -> Self {
        assert!(w >= 1 && h >= 1, "window sides must be >= 1");
        Self { x0, y0, w, h }
    }

    /// Window covering a whole `w`x`h` image.
    pub fn full(w: u32, h: u32) -> Self {
        Self::new(0, 0, w, h)
    }

    #[inline]
    pub fn right(&self) -> u32 {
        self.x0 + self.w
    }

    #[inline]
    pub fn bottom(&self) -> u32 {
        self.y0 + self.h
    }

    #[inline]
    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    #[inline]
    pub fn fits_in(&self, image_w: u32, image_h: u32) -> bool {
        self.right() <= image_w && self.bottom() <= image_h
    }

    #[inline]
    pub fn contains_pixel(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.right() && y >= self.y0 && y < self.bottom()
    }
}

/// The ten MDP actions. Encoding 0..9 is stable: it indexes both Q-network
/// outputs and history one-hot blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActionKind {
    ZoomCenter,
    ZoomTopLeft,
    ZoomTopRight,
    ZoomBottomLeft,
    ZoomBottomRight,
    ShiftUp,
    ShiftDown,
    ShiftLeft,
    ShiftRight,
    Trigger,
}

impl ActionKind {
    pub const COUNT: usize = 10;
    /// Number of moving (non-trigger) actions.
    pub const MOVE_COUNT: usize = 9;

    pub const ALL: [ActionKind; 10] = [
        ActionKind::ZoomCenter,
        ActionKind::ZoomTopLeft,
        ActionKind::ZoomTopRight,
        ActionKind::ZoomBottomLeft,
        ActionKind::ZoomBottomRight,
        ActionKind::ShiftUp,
        ActionKind::ShiftDown,
        ActionKind::ShiftLeft,
        ActionKind::ShiftRight,
        ActionKind::Trigger,
    ];

    #[inline]
    pub fn index(self) -> usize {
        match self {
            ActionKind::ZoomCenter => 0,
            ActionKind::ZoomTopLeft => 1,
            ActionKind::ZoomTopRight => 2,
            ActionKind::ZoomBottomLeft => 3,
            ActionKind::ZoomBottomRight => 4,
            ActionKind::ShiftUp => 5,
            ActionKind::ShiftDown => 6,
            ActionKind::ShiftLeft => 7,
            ActionKind::ShiftRight => 8,
            ActionKind::Trigger => 9,
        }
    }

    pub fn from_index(i: usize) -> Option<ActionKind> {
        ActionKind::ALL.get(i).copied()
    }

    #[inline]
    pub fn is_move(self) -> bool {
        self != ActionKind::Trigger
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::ZoomCenter => "zoom_center",
            ActionKind::ZoomTopLeft => "zoom_top_left",
            ActionKind::ZoomTopRight => "zoom_top_right",
            ActionKind::ZoomBottomLeft => "zoom_bottom_left",
            ActionKind::ZoomBottomRight => "zoom_bottom_right",
            ActionKind::ShiftUp => "shift_up",
            ActionKind::ShiftDown => "shift_down",
            ActionKind::ShiftLeft => "shift_left",
            ActionKind::ShiftRight => "shift_right",
            ActionKind::Trigger => "trigger",
        }
    }
}

/// Binary ground-truth slice: 0 = background, 1 = foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSlice {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl MaskSlice {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![0; width as usize * height as usize] }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self, GeometryError> {
        if data.len() != width as usize * height as usize {
            return Err(GeometryError::MaskLengthMismatch { width, height, got: data.len() });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(GeometryError::NonBinaryMask);
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[inline]
    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.data[y as usize * self.width as usize + x as usize] = v as u8;
    }

    pub fn foreground_count(&self) -> u64 {
        self.data.iter().map(|&v| v as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Foreground pixels inside `win`, counting the window as a solid rectangle.
    pub fn foreground_in_window(&self, win: &Window) -> u64 {
        let mut n = 0u64;
        for y in win.y0..win.bottom().min(self.height) {
            let row = y as usize * self.width as usize;
            for x in win.x0..win.right().min(self.width) {
                n += self.data[row + x as usize] as u64;
            }
        }
        n
    }

    /// Nearest-neighbor resample to `out_w` x `out_h`.
    pub fn resize_nearest(&self, out_w: u32, out_h: u32) -> MaskSlice {
        assert!(out_w >= 1 && out_h >= 1);
        let mut out = MaskSlice::zeros(out_w, out_h);
        for oy in 0..out_h {
            let sy = ((oy as u64 * self.height as u64) / out_h as u64).min(self.height as u64 - 1) as u32;
            for ox in 0..out_w {
                let sx = ((ox as u64 * self.width as u64) / out_w as u64).min(self.width as u64 - 1) as u32;
                out.set(ox, oy, self.get(sx, sy) == 1);
            }
        }
        out
    }
}

/// Integer round-half-up of `num/den`.
#[inline]
fn round_half_up_div(num: u32, den: u32) -> u32 {
    (2 * num + den) / (2 * den)
}

/// Clamp `win` so it lies fully inside a `image_w` x `image_h` image.
fn clamp_into_image(x0: i64, y0: i64, w: u32, h: u32, image_w: u32, image_h: u32) -> Window {
    let w = w.min(image_w).max(1);
    let h = h.min(image_h).max(1);
    let x0 = x0.clamp(0, (image_w - w) as i64) as u32;
    let y0 = y0.clamp(0, (image_h - h) as i64) as u32;
    Window { x0, y0, w, h }
}

/// Apply a moving action with the default minimum window side.
pub fn apply_action(
    win: Window,
    action: ActionKind,
    image_w: u32,
    image_h: u32,
) -> Result<Window, GeometryError> {
    apply_action_min_side(win, action, image_w, image_h, DEFAULT_MIN_WINDOW_SIDE)
}

/// Apply a moving action: zooms shrink both sides to 3/4 anchored at the
/// named corner (or center), shifts translate by a quarter of the current
/// window size. The result is clamped inside the image and zoomed sides
/// never fall below `min_side` (nor grow past the current size).
pub fn apply_action_min_side(
    win: Window,
    action: ActionKind,
    image_w: u32,
    image_h: u32,
    min_side: u32,
) -> Result<Window, GeometryError> {
    if action == ActionKind::Trigger {
        return Err(GeometryError::TriggerHasNoGeometry);
    }
    if win.w > image_w || win.h > image_h {
        return Err(GeometryError::WindowOutsideImage(win, image_w, image_h));
    }
    // A window that merely overhangs the border is pulled back in; only a
    // window too large to fit at all is rejected.
    let win = clamp_into_image(win.x0 as i64, win.y0 as i64, win.w, win.h, image_w, image_h);

    let zoomed_side = |side: u32| -> u32 {
        let target = round_half_up_div(3 * side, 4);
        // Never grow, never fall below the (image-capped) minimum.
        target.max(min_side.min(side)).min(side)
    };

    let out = match action {
        ActionKind::ZoomCenter => {
            let (w2, h2) = (zoomed_side(win.w), zoomed_side(win.h));
            // Center-preserving, rounding toward the top-left.
            let x0 = (2 * win.x0 + win.w - w2) as i64 / 2;
            let y0 = (2 * win.y0 + win.h - h2) as i64 / 2;
            clamp_into_image(x0, y0, w2, h2, image_w, image_h)
        }
        ActionKind::ZoomTopLeft => {
            let (w2, h2) = (zoomed_side(win.w), zoomed_side(win.h));
            clamp_into_image(win.x0 as i64, win.y0 as i64, w2, h2, image_w, image_h)
        }
        ActionKind::ZoomTopRight => {
            let (w2, h2) = (zoomed_side(win.w), zoomed_side(win.h));
            clamp_into_image((win.right() - w2) as i64, win.y0 as i64, w2, h2, image_w, image_h)
        }
        ActionKind::ZoomBottomLeft => {
            let (w2, h2) = (zoomed_side(win.w), zoomed_side(win.h));
            clamp_into_image(win.x0 as i64, (win.bottom() - h2) as i64, w2, h2, image_w, image_h)
        }
        ActionKind::ZoomBottomRight => {
            let (w2, h2) = (zoomed_side(win.w), zoomed_side(win.h));
            clamp_into_image(
                (win.right() - w2) as i64,
                (win.bottom() - h2) as i64,
                w2,
                h2,
                image_w,
                image_h,
            )
        }
        ActionKind::ShiftUp => {
            let d = round_half_up_div(win.h, 4) as i64;
            clamp_into_image(win.x0 as i64, win.y0 as i64 - d, win.w, win.h, image_w, image_h)
        }
        ActionKind::ShiftDown => {
            let d = round_half_up_div(win.h, 4) as i64;
            clamp_into_image(win.x0 as i64, win.y0 as i64 + d, win.w, win.h, image_w, image_h)
        }
        ActionKind::ShiftLeft => {
            let d = round_half_up_div(win.w, 4) as i64;
            clamp_into_image(win.x0 as i64 - d, win.y0 as i64, win.w, win.h, image_w, image_h)
        }
        ActionKind::ShiftRight => {
            let d = round_half_up_div(win.w, 4) as i64;
            clamp_into_image(win.x0 as i64 + d, win.y0 as i64, win.w, win.h, image_w, image_h)
        }
        ActionKind::Trigger => unreachable!(),
    };
    Ok(out)
}

/// Modified IoU: |window ∩ foreground| / |window ∪ foreground| with the
/// window counted as a solid pixel rectangle and the foreground taken from
/// the mask itself rather than its bounding box. Empty mask and degenerate
/// window together yield 0.
pub fn modified_iou(win: &Window, mask: &MaskSlice) -> f64 {
    assert!(
        win.fits_in(mask.width(), mask.height()),
        "window must be bound to mask dimensions"
    );
    let inter = mask.foreground_in_window(win);
    let union = win.area() + mask.foreground_count() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// Fraction of foreground pixels captured inside the window.
pub fn recall(win: &Window, mask: &MaskSlice) -> Result<f64, GeometryError> {
    assert!(
        win.fits_in(mask.width(), mask.height()),
        "window must be bound to mask dimensions"
    );
    let fg = mask.foreground_count();
    if fg == 0 {
        return Err(GeometryError::EmptyMask);
    }
    Ok(mask.foreground_in_window(win) as f64 / fg as f64)
}

/// Scale a window about its center by `factor` (>= 1), then clamp inside the
/// image. Sizes round half-up, the origin floors.
pub fn dilate_box(win: &Window, factor: f64, image_w: u32, image_h: u32) -> Window {
    assert!(factor >= 1.0, "dilation factor must be >= 1");
    let w2 = (win.w as f64 * factor + 0.5).floor() as u32;
    let h2 = (win.h as f64 * factor + 0.5).floor() as u32;
    let x0 = ((2 * win.x0 as i64 + win.w as i64) - w2 as i64).div_euclid(2);
    let y0 = ((2 * win.y0 as i64 + win.h as i64) - h2 as i64).div_euclid(2);
    clamp_into_image(x0, y0, w2, h2, image_w, image_h)
}

/// Tightest axis-aligned rectangle containing all foreground pixels.
pub fn mask_bbox(mask: &MaskSlice) -> Result<Window, GeometryError> {
    let (mut min_x, mut min_y) = (u32::MAX, u32::MAX);
    let (mut max_x, mut max_y) = (0u32, 0u32);
    let mut any = false;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) == 1 {
                any = true;
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
            }
        }
    }
    if !any {
        return Err(GeometryError::EmptyMask);
    }
    Ok(Window { x0: min_x, y0: min_y, w: max_x - min_x + 1, h: max_y - min_y + 1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with(width: u32, height: u32, fg: &[(u32, u32)]) -> MaskSlice {
        let mut m = MaskSlice::zeros(width, height);
        for &(x, y) in fg {
            m.set(x, y, true);
        }
        m
    }

    fn rect_mask(width: u32, height: u32, win: Window) -> MaskSlice {
        let mut m = MaskSlice::zeros(width, height);
        for y in win.y0..win.bottom() {
            for x in win.x0..win.right() {
                m.set(x, y, true);
            }
        }
        m
    }

    #[test]
    fn zoom_top_left_keeps_origin() {
        let w = apply_action(Window::new(0, 0, 224, 224), ActionKind::ZoomTopLeft, 224, 224).unwrap();
        assert_eq!(w, Window::new(0, 0, 168, 168));
    }

    #[test]
    fn shift_right_translates_by_quarter_width() {
        let w = apply_action(Window::new(0, 0, 100, 100), ActionKind::ShiftRight, 224, 224).unwrap();
        assert_eq!(w, Window::new(25, 0, 100, 100));
    }

    #[test]
    fn shift_right_clamps_at_border() {
        let w = apply_action(Window::new(150, 0, 100, 100), ActionKind::ShiftRight, 224, 224).unwrap();
        assert_eq!(w, Window::new(124, 0, 100, 100));
    }

    #[test]
    fn zoom_center_preserves_center_with_floor_rounding() {
        // Arithmetic oracle: w' = round(3*100/4) = 75, center 150.0,
        // origin floor(150 - 75/2) = floor(112.5) = 112 on both axes.
        let w = apply_action(Window::new(100, 100, 100, 100), ActionKind::ZoomCenter, 300, 300).unwrap();
        assert_eq!(w, Window::new(112, 112, 75, 75));
    }

    #[test]
    fn corner_zooms_anchor_their_corner() {
        let win = Window::new(40, 40, 100, 100);
        let tr = apply_action(win, ActionKind::ZoomTopRight, 300, 300).unwrap();
        assert_eq!((tr.right(), tr.y0), (win.right(), win.y0));
        let bl = apply_action(win, ActionKind::ZoomBottomLeft, 300, 300).unwrap();
        assert_eq!((bl.x0, bl.bottom()), (win.x0, win.bottom()));
        let br = apply_action(win, ActionKind::ZoomBottomRight, 300, 300).unwrap();
        assert_eq!((br.right(), br.bottom()), (win.right(), win.bottom()));
    }

    #[test]
    fn zoom_respects_min_side() {
        let w = apply_action(Window::new(0, 0, 9, 9), ActionKind::ZoomCenter, 64, 64).unwrap();
        assert_eq!((w.w, w.h), (8, 8));
        // Already below the minimum: zoom becomes a no-op on sizes.
        let w = apply_action_min_side(Window::new(0, 0, 5, 5), ActionKind::ZoomTopLeft, 64, 64, 8).unwrap();
        assert_eq!((w.w, w.h), (5, 5));
    }

    #[test]
    fn trigger_is_rejected() {
        let e = apply_action(Window::new(0, 0, 10, 10), ActionKind::Trigger, 64, 64);
        assert_eq!(e.unwrap_err(), GeometryError::TriggerHasNoGeometry);
    }

    #[test]
    fn oversized_window_is_rejected() {
        let e = apply_action(Window::new(0, 0, 70, 10), ActionKind::ShiftLeft, 64, 64);
        assert!(matches!(e.unwrap_err(), GeometryError::WindowOutsideImage(..)));
    }

    #[test]
    fn overhanging_window_is_clamped_before_acting() {
        // Mirrors the clamp-at-border case: 150 -> shift 25 -> clamp to 124.
        let w = apply_action(Window::new(150, 0, 100, 100), ActionKind::ShiftRight, 224, 224).unwrap();
        assert_eq!(w, Window::new(124, 0, 100, 100));
    }

    #[test]
    fn iou_full_window_over_small_mask() {
        let mut m = MaskSlice::zeros(224, 224);
        for i in 0..100u32 {
            m.set(i % 50 + 10, i / 50 + 10, true);
        }
        let win = Window::full(224, 224);
        assert_eq!(modified_iou(&win, &m), 100.0 / 50176.0);
    }

    #[test]
    fn iou_exact_cover_is_one() {
        let target = Window::new(5, 6, 7, 8);
        let m = rect_mask(64, 64, target);
        assert_eq!(modified_iou(&target, &m), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let m = rect_mask(64, 64, Window::new(40, 40, 5, 5));
        assert_eq!(modified_iou(&Window::new(0, 0, 10, 10), &m), 0.0);
    }

    #[test]
    fn recall_cases() {
        let m = rect_mask(64, 64, Window::new(10, 10, 10, 10));
        assert_eq!(recall(&Window::full(64, 64), &m).unwrap(), 1.0);
        // Left half of the target inside the window.
        assert_eq!(recall(&Window::new(0, 0, 15, 64), &m).unwrap(), 0.5);
        assert_eq!(recall(&Window::new(40, 40, 10, 10), &m).unwrap(), 0.0);
        assert_eq!(recall(&Window::full(64, 64), &MaskSlice::zeros(64, 64)).unwrap_err(), GeometryError::EmptyMask);
    }

    #[test]
    fn dilate_center_scale() {
        let w = dilate_box(&Window::new(50, 50, 100, 100), 1.5, 300, 300);
        assert_eq!(w, Window::new(25, 25, 150, 150));
    }

    #[test]
    fn dilate_scale_then_clamp() {
        // Arithmetic oracle: 100*1.5 = 150, capped at image side 120;
        // origin floor(50 - 150/2) = -25, clamped to 0.
        let w = dilate_box(&Window::new(0, 0, 100, 100), 1.5, 120, 120);
        assert_eq!(w, Window::new(0, 0, 120, 120));
    }

    #[test]
    fn dilate_identity_factor() {
        let w = dilate_box(&Window::new(10, 10, 20, 20), 1.0, 64, 64);
        assert_eq!(w, Window::new(10, 10, 20, 20));
    }

    #[test]
    fn bbox_single_pixel() {
        let m = mask_with(32, 32, &[(5, 7)]);
        assert_eq!(mask_bbox(&m).unwrap(), Window::new(5, 7, 1, 1));
    }

    #[test]
    fn bbox_full_frame() {
        let m = rect_mask(16, 12, Window::full(16, 12));
        assert_eq!(mask_bbox(&m).unwrap(), Window::full(16, 12));
    }

    #[test]
    fn bbox_two_pixel_envelope() {
        let m = mask_with(32, 32, &[(2, 3), (10, 20)]);
        assert_eq!(mask_bbox(&m).unwrap(), Window::new(2, 3, 9, 18));
    }

    #[test]
    fn bbox_empty_mask_fails() {
        assert_eq!(mask_bbox(&MaskSlice::zeros(8, 8)).unwrap_err(), GeometryError::EmptyMask);
    }

    #[test]
    fn mask_from_raw_validates() {
        assert!(MaskSlice::from_raw(4, 4, vec![0; 15]).is_err());
        assert!(MaskSlice::from_raw(4, 4, vec![2; 16]).is_err());
        assert!(MaskSlice::from_raw(4, 4, vec![1; 16]).is_ok());
    }
}
