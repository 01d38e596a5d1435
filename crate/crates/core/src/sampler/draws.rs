use std::collections::HashMap;
use std::io::{Read, Write};

use super::{ModelState, SamplerError};
use crate::data::{ModelData, Urbanicity};
use crate::format_float;

/// Flat parameter ordering: theta by PSU, mu by stratum, beta_1, beta_2,
/// then sigma_t, sigma_theta, sigma_mu.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub n_psus: usize,
    pub n_strata: usize,
    pub p: usize,
    names: Vec<String>,
}

impl ParamLayout {
    pub fn new(data: &ModelData) -> Self {
        let hh = &data.households;
        let mut names = Vec::new();
        for psu in &hh.psus {
            let u = hh.strata[psu.stratum].urbanicity;
            names.push(format!(
                "theta[{}:{}:{}]",
                hh.comunas[psu.comuna].id, u, psu.id
            ));
        }
        for s in &hh.strata {
            names.push(format!("mu[{}:{}]", hh.comunas[s.comuna].id, s.urbanicity));
        }
        for u in Urbanicity::ALL {
            for j in 0..data.p() {
                names.push(format!("beta[{u}:{j}]"));
            }
        }
        names.extend(["sigma_t", "sigma_theta", "sigma_mu"].map(String::from));
        ParamLayout {
            n_psus: hh.psus.len(),
            n_strata: hh.strata.len(),
            p: data.p(),
            names,
        }
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn theta_index(&self, psu: usize) -> usize {
        psu
    }

    pub fn mu_index(&self, stratum: usize) -> usize {
        self.n_psus + stratum
    }

    pub fn beta_index(&self, u: Urbanicity, j: usize) -> usize {
        self.n_psus + self.n_strata + u.index() * self.p + j
    }

    pub fn sigma_t_index(&self) -> usize {
        self.dim() - 3
    }

    /// True for beta and the SDs.
    pub fn is_hyperparameter(&self, i: usize) -> bool {
        i >= self.n_psus + self.n_strata
    }

    pub fn push_state(&self, state: &ModelState, out: &mut Vec<f64>) {
        out.extend_from_slice(&state.theta);
        out.extend_from_slice(&state.mu);
        out.extend_from_slice(&state.beta[0]);
        out.extend_from_slice(&state.beta[1]);
        out.extend([state.sigma_t, state.sigma_theta, state.sigma_mu]);
    }

    pub fn state_from(&self, flat: &[f64]) -> ModelState {
        assert_eq!(flat.len(), self.dim());
        let (theta, rest) = flat.split_at(self.n_psus);
        let (mu, rest) = rest.split_at(self.n_strata);
        let (b1, rest) = rest.split_at(self.p);
        let (b2, sd) = rest.split_at(self.p);
        ModelState {
            theta: theta.to_vec(),
            mu: mu.to_vec(),
            beta: [b1.to_vec(), b2.to_vec()],
            sigma_t: sd[0],
            sigma_theta: sd[1],
            sigma_mu: sd[2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunMeta {
    pub seed: u64,
    pub burn_in: usize,
    pub draws: usize,
    pub thin: usize,
}

/// Retained states of one or more chains, each chain stored as a flat
/// row-major `draws x dim` array.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawsStore {
    layout: ParamLayout,
    chains: Vec<Vec<f64>>,
    meta: RunMeta,
}

impl DrawsStore {
    pub fn new(layout: ParamLayout, chains: Vec<Vec<f64>>, meta: RunMeta) -> Self {
        let len = chains.first().map_or(0, Vec::len);
        assert!(
            chains.iter().all(|c| c.len() == len),
            "chain lengths differ"
        );
        assert_eq!(len % layout.dim().max(1), 0);
        DrawsStore {
            layout,
            chains,
            meta,
        }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn meta(&self) -> &RunMeta {
        &self.meta
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    /// Retained draws per chain.
    pub fn n_draws(&self) -> usize {
        self.chains
            .first()
            .map_or(0, |c| c.len() / self.layout.dim())
    }

    pub fn flat(&self, chain: usize, r: usize) -> &[f64] {
        let d = self.layout.dim();
        &self.chains[chain][r * d..(r + 1) * d]
    }

    pub fn state(&self, chain: usize, r: usize) -> ModelState {
        self.layout.state_from(self.flat(chain, r))
    }

    /// All retained states, chains concatenated in chain order.
    pub fn states(&self) -> impl Iterator<Item = ModelState> + '_ {
        (0..self.n_chains()).flat_map(move |c| (0..self.n_draws()).map(move |r| self.state(c, r)))
    }

    /// Trace of parameter `i`, one vector per chain.
    pub fn series(&self, i: usize) -> Vec<Vec<f64>> {
        let d = self.layout.dim();
        self.chains
            .iter()
            .map(|c| c.iter().skip(i).step_by(d).copied().collect())
            .collect()
    }

    /// Long-format CSV `chain,iter,param,value` with 1-based chain and
    /// iteration numbers.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SamplerError> {
        let err = |e: csv::Error| SamplerError::DrawsFile(e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["chain", "iter", "param", "value"])
            .map_err(err)?;
        for c in 0..self.n_chains() {
            let chain = (c + 1).to_string();
            for r in 0..self.n_draws() {
                let iter = (r + 1).to_string();
                for (name, v) in self.layout.names.iter().zip(self.flat(c, r)) {
                    w.write_record([chain.as_str(), &iter, name, &format_float(*v)])
                        .map_err(err)?;
                }
            }
        }
        w.flush()
            .map_err(|e| SamplerError::DrawsFile(e.to_string()))
    }

    /// Reads a file written by [`DrawsStore::write_csv`]. Every
    /// (chain, iter, param) cell must appear exactly once.
    pub fn read_csv<R: Read>(
        reader: R,
        layout: ParamLayout,
        meta: RunMeta,
    ) -> Result<Self, SamplerError> {
        let bad = |m: String| SamplerError::DrawsFile(m);
        let index: HashMap<&str, usize> = layout
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["chain", "iter", "param", "value"] {
            return Err(bad(format!("unexpected header {headers:?}")));
        }
        let mut cells: Vec<(usize, usize, usize, f64)> = Vec::new();
        let (mut n_chains, mut n_iter) = (0, 0);
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let parse_idx = |k: usize| -> Result<usize, SamplerError> {
                rec[k]
                    .parse::<usize>()
                    .ok()
                    .filter(|&v| v >= 1)
                    .ok_or_else(|| bad(format!("row {}: bad index `{}`", row + 1, &rec[k])))
            };
            let chain = parse_idx(0)?;
            let iter = parse_idx(1)?;
            let param = *index
                .get(&rec[2])
                .ok_or_else(|| bad(format!("row {}: unknown parameter `{}`", row + 1, &rec[2])))?;
            let value: f64 = rec[3]
                .parse()
                .map_err(|_| bad(format!("row {}: bad value `{}`", row + 1, &rec[3])))?;
            n_chains = n_chains.max(chain);
            n_iter = n_iter.max(iter);
            cells.push((chain - 1, iter - 1, param, value));
        }
        let d = layout.dim();
        if cells.len() != n_chains * n_iter * d || cells.is_empty() {
            return Err(bad(format!(
                "expected {n_chains} chains x {n_iter} draws x {d} params, found {} rows",
                cells.len()
            )));
        }
        let mut chains = vec![vec![f64::NAN; n_iter * d]; n_chains];
        let mut filled = vec![vec![false; n_iter * d]; n_chains];
        for (c, r, i, v) in cells {
            if std::mem::replace(&mut filled[c][r * d + i], true) {
                return Err(bad(format!(
                    "duplicate cell chain {} iter {} param {}",
                    c + 1,
                    r + 1,
                    layout.names[i]
                )));
            }
            chains[c][r * d + i] = v;
        }
        Ok(DrawsStore::new(layout, chains, meta))
    }
}
