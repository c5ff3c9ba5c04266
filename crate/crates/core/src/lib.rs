//! Computational kernel for finite-dimensional integrable systems.
//!
//! The crate builds Liouville torus charts for declared integrable systems
//! (commuting vector fields plus joint first integrals), computes action
//! variables by contour and path integrals, averages tensor fields over the
//! torus action to test conservation properties, and carries out
//! Poincare-Dulac / Birkhoff normalization of formal vector fields and
//! Hamiltonians in exact arithmetic over user-declared number fields.
//!
//! Layering, bottom to top:
//!
//! * [`expr`] - exact symbolic expressions: parsing, printing, derivatives,
//!   evaluation.
//! * [`geometry`] - differential 2-forms, Poisson bivectors, tensor fields,
//!   Hamiltonian vector fields, Lie derivatives, Jacobi identity checks.
//! * [`flow`] - adaptive Runge-Kutta integration of symbolic vector fields.
//! * [`torus`] - period lattices, angle charts and frequency matrices on
//!   Liouville tori.
//! * [`action`] - Mineur contour actions, leafwise path actions, action-angle
//!   normal forms, co-affine charts.
//! * [`conservation`] - torus averaging, conservation and conformal checks,
//!   irrationality probes.
//! * [`numberfield`], [`series`], [`normalform`] - exact scalars over
//!   declared irrational bases, sparse formal series, and normal-form
//!   computations (semisimple splits, resonance lattices, toric degrees,
//!   Williamson types).

pub mod action;
pub mod conservation;
pub mod expr;
pub mod flow;
pub mod geometry;
pub mod normalform;
pub mod numberfield;
pub(crate) mod ratmat;
pub mod series;
pub mod torus;
