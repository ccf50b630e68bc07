//! Residual code grids: `R` layers × `N` positions.

use alloc::vec::Vec;

use crate::error::{bail, Result};

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CodeGrid {
    layers: Vec<Vec<usize>>,
}

impl CodeGrid {
    pub fn new(layers: Vec<Vec<usize>>) -> Result<Self> {
        let Some(first) = layers.first() else {
            bail!(Argument, "a code grid needs at least one layer");
        };
        let n = first.len();
        if let Some((r, l)) = layers.iter().enumerate().find(|(_, l)| l.len() != n) {
            bail!(Shape, "layer {} has {} positions, expected {}", r, l.len(), n);
        }
        Ok(Self { layers })
    }

    /// An `R × N` grid built from per-position columns.
    pub fn from_columns(num_layers: usize, columns: &[Vec<usize>]) -> Result<Self> {
        let mut layers = alloc::vec![Vec::with_capacity(columns.len()); num_layers];
        for (i, c) in columns.iter().enumerate() {
            if c.len() != num_layers {
                bail!(Shape, "column {} has {} codes, expected {}", i, c.len(), num_layers);
            }
            for (r, &code) in c.iter().enumerate() {
                layers[r].push(code);
            }
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Vec<usize>] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Number of positions `N`.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, layer: usize, position: usize) -> usize {
        self.layers[layer][position]
    }

    pub fn column(&self, position: usize) -> Vec<usize> {
        self.layers.iter().map(|l| l[position]).collect()
    }

    pub fn columns(&self) -> Vec<Vec<usize>> {
        (0..self.len()).map(|i| self.column(i)).collect()
    }

    /// Columns picked by index, in order.
    pub fn select(&self, positions: &[usize]) -> CodeGrid {
        CodeGrid {
            layers: self
                .layers
                .iter()
                .map(|l| positions.iter().map(|&p| l[p]).collect())
                .collect(),
        }
    }
}
