//! Resource polynomial over per-site retention fractions.
//!
//! `F = sum F_ab w_a w_b + sum G_a w_a + const`, in MACs. The variables are
//! *channel groups*: a whole site in the common case, or the part of a site
//! that reaches one layer through a slice. A group's fraction is the
//! multiplicity-weighted mean retention probability of its channels, so
//! evaluating at 0/1 probabilities gives the exact MAC count of the
//! corresponding dense sub-network.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::real::Real;

/// What the polynomial counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    /// Multiply-accumulates of conv and dense layers.
    #[default]
    Macs,
    /// Weight count of conv and dense layers (biases excluded).
    Weights,
}

/// Channels of one site, each with the number of times it is consumed.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ChannelGroup {
    pub site: usize,
    /// `(channel, multiplicity)`, sorted by channel.
    pub members: Vec<(usize, usize)>,
}

impl ChannelGroup {
    pub fn weight(&self) -> usize {
        self.members.iter().map(|m| m.1).sum()
    }

    pub fn is_whole_site(&self, channels: usize) -> bool {
        self.members.len() == channels && self.members.iter().enumerate().all(|(i, m)| m.0 == i)
    }
}

/// Terms contributed by one layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerCost {
    pub layer: String,
    pub quadratic: Vec<(usize, usize, Real)>,
    pub linear: Vec<(usize, Real)>,
    pub constant: Real,
}

impl LayerCost {
    pub fn full(&self) -> Real {
        self.quadratic.iter().map(|t| t.2).sum::<Real>() + self.linear.iter().map(|t| t.1).sum::<Real>() + self.constant
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResourcePolynomial {
    pub kind: ResourceKind,
    pub site_names: Vec<String>,
    pub site_channels: Vec<usize>,
    pub groups: Vec<ChannelGroup>,
    pub layers: Vec<LayerCost>,
    quadratic: Vec<(usize, usize, Real)>,
    linear: Vec<(usize, Real)>,
    constant: Real,
}

/// A consumed channel position: `None` if ungated, otherwise `(site, channel)`.
pub type Binding = Option<(usize, usize)>;

/// Accumulates layer terms and merges them into a [`ResourcePolynomial`].
pub struct PolynomialBuilder {
    poly: ResourcePolynomial,
    group_index: BTreeMap<ChannelGroup, usize>,
}

impl PolynomialBuilder {
    pub fn new(kind: ResourceKind, site_names: Vec<String>, site_channels: Vec<usize>) -> Self {
        Self {
            poly: ResourcePolynomial {
                kind,
                site_names,
                site_channels,
                ..Default::default()
            },
            group_index: BTreeMap::new(),
        }
    }

    fn intern(&mut self, g: ChannelGroup) -> usize {
        if let Some(&i) = self.group_index.get(&g) {
            return i;
        }
        let i = self.poly.groups.len();
        self.poly.groups.push(g.clone());
        self.group_index.insert(g, i);
        i
    }

    /// Splits consumed positions into per-site groups plus an ungated count.
    fn split(&mut self, positions: &[Binding]) -> (Vec<(usize, Real)>, Real) {
        let mut per_site: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
        let mut ungated = 0usize;
        for b in positions {
            match b {
                Some((site, ch)) => *per_site.entry(*site).or_default().entry(*ch).or_default() += 1,
                None => ungated += 1,
            }
        }
        let groups = per_site
            .into_iter()
            .map(|(site, members)| {
                let g = ChannelGroup {
                    site,
                    members: members.into_iter().collect(),
                };
                let count = g.weight() as Real;
                (self.intern(g), count)
            })
            .collect();
        (groups, ungated as Real)
    }

    /// A layer whose cost is `pair_cost` per (input position, output position)
    /// pair that survives.
    pub fn add_layer(&mut self, name: &str, inputs: &[Binding], outputs: &[Binding], pair_cost: Real) {
        let (gin, uin) = self.split(inputs);
        let (gout, uout) = self.split(outputs);
        let mut cost = LayerCost {
            layer: name.to_string(),
            ..Default::default()
        };
        for &(a, na) in &gin {
            for &(b, nb) in &gout {
                cost.quadratic.push((a, b, pair_cost * na * nb));
            }
            if uout > 0.0 {
                cost.linear.push((a, pair_cost * na * uout));
            }
        }
        if uin > 0.0 {
            for &(b, nb) in &gout {
                cost.linear.push((b, pair_cost * uin * nb));
            }
        }
        cost.constant = pair_cost * uin * uout;
        self.poly.layers.push(cost);
    }

    pub fn finish(mut self) -> ResourcePolynomial {
        let mut quad: BTreeMap<(usize, usize), Real> = BTreeMap::new();
        let mut lin: BTreeMap<usize, Real> = BTreeMap::new();
        let mut constant = 0.0;
        for l in &self.poly.layers {
            for &(a, b, c) in &l.quadratic {
                *quad.entry((a.min(b), a.max(b))).or_default() += c;
            }
            for &(a, c) in &l.linear {
                *lin.entry(a).or_default() += c;
            }
            constant += l.constant;
        }
        self.poly.quadratic = quad.into_iter().map(|((a, b), c)| (a, b, c)).collect();
        self.poly.linear = lin.into_iter().collect();
        self.poly.constant = constant;
        self.poly
    }
}

impl ResourcePolynomial {
    pub fn quadratic(&self) -> &[(usize, usize, Real)] {
        &self.quadratic
    }

    pub fn linear(&self) -> &[(usize, Real)] {
        &self.linear
    }

    pub fn constant(&self) -> Real {
        self.constant
    }

    /// Value with every channel kept.
    pub fn full(&self) -> Real {
        self.eval_groups(&vec![1.0; self.groups.len()])
    }

    /// Group fractions from per-site, per-channel retention probabilities.
    pub fn group_fractions(&self, probs: &[Vec<Real>]) -> Vec<Real> {
        self.groups
            .iter()
            .map(|g| {
                let p = &probs[g.site];
                let s: Real = g.members.iter().map(|&(c, m)| m as Real * p[c]).sum();
                s / g.weight() as Real
            })
            .collect()
    }

    /// Per-site fractions `w_l = mean_c p_lc`.
    pub fn site_fractions(probs: &[Vec<Real>]) -> Vec<Real> {
        probs
            .iter()
            .map(|p| p.iter().sum::<Real>() / p.len().max(1) as Real)
            .collect()
    }

    pub fn eval_groups(&self, w: &[Real]) -> Real {
        let q: Real = self.quadratic.iter().map(|&(a, b, c)| c * w[a] * w[b]).sum();
        let l: Real = self.linear.iter().map(|&(a, c)| c * w[a]).sum();
        q + l + self.constant
    }

    /// `dF/dw` per group.
    pub fn grad_groups(&self, w: &[Real]) -> Vec<Real> {
        let mut g = vec![0.0; self.groups.len()];
        for &(a, b, c) in &self.quadratic {
            g[a] += c * w[b];
            g[b] += c * w[a];
        }
        for &(a, c) in &self.linear {
            g[a] += c;
        }
        g
    }

    /// `F` at the given retention probabilities.
    pub fn eval(&self, probs: &[Vec<Real>]) -> Real {
        self.eval_groups(&self.group_fractions(probs))
    }

    /// `dF/dp` for every channel of every site.
    pub fn grad_p(&self, probs: &[Vec<Real>]) -> Vec<Vec<Real>> {
        let gw = self.grad_groups(&self.group_fractions(probs));
        let mut out: Vec<Vec<Real>> = probs.iter().map(|p| vec![0.0; p.len()]).collect();
        for (g, d) in self.groups.iter().zip(gw) {
            let total = g.weight() as Real;
            for &(c, m) in &g.members {
                out[g.site][c] += d * m as Real / total;
            }
        }
        out
    }

    /// `F` with a hard 0/1 keep mask.
    pub fn eval_mask(&self, masks: &[Vec<bool>]) -> Real {
        let probs: Vec<Vec<Real>> = masks
            .iter()
            .map(|m| m.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect())
            .collect();
        self.eval(&probs)
    }

    /// The same polynomial in different units (e.g. MAC to kMAC with 1e-3).
    pub fn rescaled(&self, factor: Real) -> Self {
        let mut p = self.clone();
        for t in &mut p.quadratic {
            t.2 *= factor;
        }
        for t in &mut p.linear {
            t.1 *= factor;
        }
        p.constant *= factor;
        for l in &mut p.layers {
            for t in &mut l.quadratic {
                t.2 *= factor;
            }
            for t in &mut l.linear {
                t.1 *= factor;
            }
            l.constant *= factor;
        }
        p
    }

    /// Human-readable name of a group.
    pub fn group_label(&self, g: usize) -> String {
        let grp = &self.groups[g];
        let name = &self.site_names[grp.site];
        if grp.is_whole_site(self.site_channels[grp.site]) {
            format!("w[{name}]")
        } else {
            format!("w[{name}:{} ch]", grp.members.len())
        }
    }
}
