//! Track geometry: a cyclic sequence of segments, some of which interrupt the
//! power rails.

use thiserror::Error;

use crate::energy::PowerState;

/// Rounds a track coordinate to the picometre so that sums of segment
/// lengths and odometer steps compare equal where they should.
pub fn snap(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackError {
    #[error("track has no segments")]
    Empty,
    #[error("segment {index}: length must be > 0, got {length}")]
    BadLength { index: usize, length: f64 },
    #[error("segment {index}: gap [{start}, {end}] does not fit inside the segment")]
    GapOutside { index: usize, start: f64, end: f64 },
    #[error("segment {index}: gaps overlap")]
    GapsOverlap { index: usize },
    #[error("dock position {0} is outside the track")]
    DockOffTrack(f64),
    #[error("dock position {0} lies inside an unpowered gap")]
    DockInGap(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum SegmentKind {
    Straight,
    Curve,
    /// Two unpowered gaps at the given offsets from the segment start.
    LaneChange {
        gap_offsets: [f64; 2],
        gap_length: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub length: f64,
}

impl Segment {
    pub fn straight(length: f64) -> Self {
        Self {
            kind: SegmentKind::Straight,
            length,
        }
    }

    pub fn curve(length: f64) -> Self {
        Self {
            kind: SegmentKind::Curve,
            length,
        }
    }

    pub fn lane_change(length: f64, gap_offsets: [f64; 2], gap_length: f64) -> Self {
        Self {
            kind: SegmentKind::LaneChange {
                gap_offsets,
                gap_length,
            },
            length,
        }
    }
}

/// An unpowered stretch, in absolute track coordinates `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gap {
    pub start: f64,
    pub end: f64,
    pub segment: usize,
}

impl Gap {
    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    fn contains(&self, pos: f64) -> bool {
        pos >= self.start && pos < self.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackLayout {
    pub segments: Vec<Segment>,
    pub dock_position: Option<f64>,
    gaps: Vec<Gap>,
    total_length: f64,
}

impl TrackLayout {
    pub fn new(segments: Vec<Segment>, dock_position: Option<f64>) -> Result<Self, TrackError> {
        if segments.is_empty() {
            return Err(TrackError::Empty);
        }
        let mut gaps = Vec::new();
        let mut offset = 0.0;
        for (index, seg) in segments.iter().enumerate() {
            if !(seg.length > 0.0 && seg.length.is_finite()) {
                return Err(TrackError::BadLength {
                    index,
                    length: seg.length,
                });
            }
            if let SegmentKind::LaneChange {
                gap_offsets,
                gap_length,
            } = seg.kind
            {
                let mut local = gap_offsets;
                local.sort_by(f64::total_cmp);
                for &start in &local {
                    let end = start + gap_length;
                    if !(start >= 0.0 && gap_length > 0.0 && end <= seg.length) {
                        return Err(TrackError::GapOutside { index, start, end });
                    }
                }
                if local[0] + gap_length > local[1] {
                    return Err(TrackError::GapsOverlap { index });
                }
                for start in local {
                    gaps.push(Gap {
                        start: snap(offset + start),
                        end: snap(offset + start + gap_length),
                        segment: index,
                    });
                }
            }
            offset = snap(offset + seg.length);
        }
        let layout = Self {
            segments,
            dock_position,
            gaps,
            total_length: offset,
        };
        if let Some(dock) = dock_position {
            if !(dock >= 0.0 && dock < layout.total_length) {
                return Err(TrackError::DockOffTrack(dock));
            }
            if layout.gap_at(dock).is_some() {
                return Err(TrackError::DockInGap(dock));
            }
        }
        Ok(layout)
    }

    /// A small oval with one double lane change. Gap entries fall 30 ms and
    /// 120 ms after entering the lane change at 3 m/s, and every boundary is
    /// a multiple of 1.5 mm so that 0.5 ms steps land exactly on them.
    pub fn reference() -> Self {
        Self::new(
            vec![
                Segment::straight(0.345),
                Segment::straight(0.345),
                Segment::curve(0.6),
                Segment::lane_change(0.45, [0.09, 0.36], 0.06),
                Segment::straight(0.345),
                Segment::straight(0.345),
                Segment::curve(0.6),
                Segment::straight(0.345),
            ],
            Some(0.1),
        )
        .expect("reference layout is valid")
    }

    /// Same oval without the lane change, so power is never interrupted.
    pub fn gapless() -> Self {
        Self::new(
            vec![
                Segment::straight(0.345),
                Segment::straight(0.345),
                Segment::curve(0.6),
                Segment::straight(0.45),
                Segment::straight(0.345),
                Segment::straight(0.345),
                Segment::curve(0.6),
                Segment::straight(0.345),
            ],
            Some(0.1),
        )
        .expect("gapless layout is valid")
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    pub fn gaps(&self) -> &[Gap] {
        &self.gaps
    }

    /// Wraps an arbitrary odometer reading onto the track.
    pub fn wrap(&self, pos: f64) -> f64 {
        let p = pos.rem_euclid(self.total_length);
        if p >= self.total_length {
            0.0
        } else {
            p
        }
    }

    /// Index of the gap containing `pos`, if any.
    pub fn gap_at(&self, pos: f64) -> Option<usize> {
        let p = self.wrap(pos);
        self.gaps.iter().position(|g| g.contains(p))
    }

    /// Gap stretches crossed when driving `distance` forward from `from`,
    /// as `(gap index, enter, exit)` distances relative to `from`, ordered.
    pub fn gap_spans(&self, from: f64, distance: f64) -> Vec<(usize, f64, f64)> {
        let mut spans = Vec::new();
        if distance <= 0.0 || self.gaps.is_empty() {
            return spans;
        }
        let from = self.wrap(from);
        let to = from + distance;
        let mut lap = 0.0;
        while lap < to {
            for (i, g) in self.gaps.iter().enumerate() {
                let start = (g.start + lap).max(from);
                let end = (g.end + lap).min(to);
                if end > start {
                    spans.push((i, start - from, end - from));
                }
            }
            lap += self.total_length;
        }
        spans
    }

    /// Whether any gap overlaps the stretch `[from, from + distance]`.
    pub fn gap_within(&self, from: f64, distance: f64) -> bool {
        self.gap_at(from).is_some() || !self.gap_spans(from, distance).is_empty()
    }

    /// Distance left until the end of the gap containing `pos`.
    pub fn distance_to_gap_exit(&self, pos: f64) -> Option<f64> {
        let p = self.wrap(pos);
        self.gap_at(p).map(|i| self.gaps[i].end - p)
    }
}

impl Default for TrackLayout {
    fn default() -> Self {
        Self::reference()
    }
}

/// Kinematic and supply state of the car as seen from the track.
#[derive(Debug, Clone, PartialEq)]
pub struct CarState {
    /// Meters along the track, in `[0, total_length)`.
    pub position: f64,
    pub speed: f64,
    pub powered: bool,
    pub capacitor_v: f64,
    pub power_state: PowerState,
    pub uptime: f64,
    pub reboot_count: u32,
}

impl CarState {
    pub fn is_stopped(&self) -> bool {
        self.speed == 0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_geometry() {
        let t = TrackLayout::reference();
        assert!((t.total_length() - 3.375).abs() < 1e-12);
        let gaps = t.gaps();
        assert_eq!(gaps.len(), 2);
        // Lane change starts at 1.29 m.
        assert!((gaps[0].start - 1.38).abs() < 1e-12);
        assert!((gaps[1].start - 1.65).abs() < 1e-12);
        // 0.27 m apart: 90 ms at 3 m/s.
        assert!((gaps[1].start - gaps[0].start - 0.27).abs() < 1e-12);
        assert!((gaps[0].length() - 0.06).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert_eq!(TrackLayout::new(vec![], None), Err(TrackError::Empty));
        assert!(matches!(
            TrackLayout::new(vec![Segment::straight(0.0)], None),
            Err(TrackError::BadLength { .. })
        ));
        assert!(matches!(
            TrackLayout::new(vec![Segment::lane_change(0.2, [0.0, 0.18], 0.06)], None),
            Err(TrackError::GapOutside { .. })
        ));
        assert!(matches!(
            TrackLayout::new(vec![Segment::lane_change(0.4, [0.1, 0.13], 0.06)], None),
            Err(TrackError::GapsOverlap { .. })
        ));
        assert!(matches!(
            TrackLayout::new(
                vec![Segment::lane_change(0.4, [0.1, 0.2], 0.06)],
                Some(0.12)
            ),
            Err(TrackError::DockInGap(_))
        ));
        assert!(matches!(
            TrackLayout::new(vec![Segment::straight(1.0)], Some(1.5)),
            Err(TrackError::DockOffTrack(_))
        ));
    }

    #[test]
    fn gap_membership_is_half_open() {
        let t = TrackLayout::reference();
        assert_eq!(t.gap_at(1.38), Some(0));
        assert_eq!(t.gap_at(1.4399), Some(0));
        assert_eq!(t.gap_at(1.44), None);
        assert_eq!(t.gap_at(1.38 + 3.375), Some(0));
        assert_eq!(t.gap_at(0.5), None);
    }

    #[test]
    fn spans_wrap_around_the_lap() {
        let t = TrackLayout::reference();
        let spans = t.gap_spans(3.0, 3.375);
        assert_eq!(spans.len(), 2);
        assert!((spans[0].1 - (1.38 + 0.375)).abs() < 1e-9);
        assert!((spans[0].2 - spans[0].1 - 0.06).abs() < 1e-9);
        assert!(t.gap_spans(0.0, 1.0).is_empty());
        // Starting inside a gap.
        let inside = t.gap_spans(1.40, 0.01);
        assert_eq!(inside.len(), 1);
        assert_eq!((inside[0].0, inside[0].1), (0, 0.0));
        assert!((inside[0].2 - 0.01).abs() < 1e-12);
    }

    #[test]
    fn lookahead_overlap() {
        let t = TrackLayout::reference();
        // 10 ms before the gap at 3 m/s with a 50 ms window.
        assert!(t.gap_within(1.38 - 0.03, 0.15));
        assert!(!t.gap_within(0.0, 0.15));
        assert!(t.gap_within(1.40, 0.0));
        assert!((t.distance_to_gap_exit(1.40).unwrap() - 0.04).abs() < 1e-12);
    }
}
