//! Fixed palette of geometric shape classes.
//!
//! Each shape is an indicator over local coordinates `(u, v)` in `[-1, 1]^2`,
//! with `v` pointing down.

use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
    Ring,
    Cross,
    Diamond,
    Ellipse,
    Frame,
    LShape,
    TShape,
    Semicircle,
}

pub const PALETTE: [Shape; 12] = [
    Shape::Circle,
    Shape::Square,
    Shape::Triangle,
    Shape::Star,
    Shape::Ring,
    Shape::Cross,
    Shape::Diamond,
    Shape::Ellipse,
    Shape::Frame,
    Shape::LShape,
    Shape::TShape,
    Shape::Semicircle,
];

impl Shape {
    pub fn from_class(class_id: usize) -> Option<Shape> {
        PALETTE.get(class_id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Star => "star",
            Shape::Ring => "ring",
            Shape::Cross => "cross",
            Shape::Diamond => "diamond",
            Shape::Ellipse => "ellipse",
            Shape::Frame => "frame",
            Shape::LShape => "l_shape",
            Shape::TShape => "t_shape",
            Shape::Semicircle => "semicircle",
        }
    }

    pub fn contains(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        let inf = u.abs().max(v.abs());
        match self {
            Shape::Circle => r2 <= 1.0,
            Shape::Square => inf <= 0.85,
            Shape::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) / 2.0,
            Shape::Star => {
                let theta = v.atan2(u) + PI / 2.0;
                r2.sqrt() <= 0.55 + 0.45 * (5.0 * theta).cos()
            }
            Shape::Ring => (0.36..=1.0).contains(&r2),
            Shape::Cross => {
                (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0)
            }
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Ellipse => u * u + (v / 0.5) * (v / 0.5) <= 1.0,
            Shape::Frame => (0.5..=0.9).contains(&inf),
            Shape::LShape => {
                ((-0.9..=-0.3).contains(&u) && v.abs() <= 0.9)
                    || (u.abs() <= 0.9 && (0.3..=0.9).contains(&v))
            }
            Shape::TShape => {
                (u.abs() <= 0.9 && (-0.9..=-0.3).contains(&v)) || (u.abs() <= 0.3 && v.abs() <= 0.9)
            }
            Shape::Semicircle => r2 <= 1.0 && v <= 0.15,
        }
    }
}
