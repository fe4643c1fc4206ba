//! Bagged CART trees with Gini splits, used by the RF attack.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub seed: u64,
}

impl ForestParams {
    pub fn new(seed: u64) -> Self {
        Self {
            n_trees: 32,
            max_depth: 8,
            min_samples_split: 2,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        p_member: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    pub root: Node,
}

impl DecisionTree {
    pub fn p_member(&self, x: &[f64]) -> f64 {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { p_member } => return *p_member,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if x[*feature] <= *threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn depth(n: &Node) -> usize {
            match n {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + depth(left).max(depth(right)),
            }
        }
        depth(&self.root)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    pub n_features: usize,
    pub trees: Vec<DecisionTree>,
}

fn gini(members: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let p = members as f64 / total as f64;
    2.0 * p * (1.0 - p)
}

struct Builder<'a> {
    xs: &'a [Vec<f64>],
    ys: &'a [usize],
    params: &'a ForestParams,
    n_candidates: usize,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn leaf(&self, idx: &[usize]) -> Node {
        let members = idx.iter().filter(|&&i| self.ys[i] == 1).count();
        Node::Leaf {
            p_member: members as f64 / idx.len().max(1) as f64,
        }
    }

    fn build(&mut self, idx: &mut [usize], depth: usize) -> Node {
        let members = idx.iter().filter(|&&i| self.ys[i] == 1).count();
        if depth >= self.params.max_depth
            || idx.len() < self.params.min_samples_split
            || members == 0
            || members == idx.len()
        {
            return self.leaf(idx);
        }
        let n_features = self.xs[0].len();
        let mut candidates = sample(&mut self.rng, n_features, self.n_candidates).into_vec();
        candidates.sort_unstable();

        // (weighted impurity, feature, threshold)
        let mut best: Option<(f64, usize, f64)> = None;
        let total_members = members;
        for &f in &candidates {
            idx.sort_by(|&a, &b| self.xs[a][f].total_cmp(&self.xs[b][f]));
            let mut left_members = 0;
            for split in 1..idx.len() {
                if self.ys[idx[split - 1]] == 1 {
                    left_members += 1;
                }
                let lo = self.xs[idx[split - 1]][f];
                let hi = self.xs[idx[split]][f];
                if lo == hi {
                    continue;
                }
                let n_left = split;
                let n_right = idx.len() - split;
                let impurity = (n_left as f64 * gini(left_members, n_left)
                    + n_right as f64 * gini(total_members - left_members, n_right))
                    / idx.len() as f64;
                if best.is_none_or(|(b, _, _)| impurity < b) {
                    best = Some((impurity, f, lo + (hi - lo) / 2.0));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return self.leaf(idx);
        };
        let mut left: Vec<usize> = idx.iter().copied().filter(|&i| self.xs[i][feature] <= threshold).collect();
        let mut right: Vec<usize> = idx.iter().copied().filter(|&i| self.xs[i][feature] > threshold).collect();
        Node::Split {
            feature,
            threshold,
            left: Box::new(self.build(&mut left, depth + 1)),
            right: Box::new(self.build(&mut right, depth + 1)),
        }
    }
}

impl RandomForest {
    /// Each tree sees a bootstrap sample and considers `⌊√d⌋` random features per split.
    pub fn fit(xs: &[Vec<f64>], ys: &[usize], params: &ForestParams) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::input("forest needs a non-empty training set with one label per row"));
        }
        if params.n_trees == 0 {
            return Err(Error::config("n_trees must be positive"));
        }
        let n_features = xs[0].len();
        if n_features == 0 || xs.iter().any(|x| x.len() != n_features) {
            return Err(Error::input("forest rows must share a positive width"));
        }
        if ys.iter().any(|&y| y > 1) {
            return Err(Error::input("forest labels must be 0 or 1"));
        }
        let n_candidates = ((n_features as f64).sqrt().floor() as usize).clamp(1, n_features);
        let mut seeder = ChaCha8Rng::seed_from_u64(params.seed);
        let trees = (0..params.n_trees)
            .map(|_| {
                let mut rng = ChaCha8Rng::seed_from_u64(seeder.gen());
                let mut idx: Vec<usize> = (0..xs.len()).map(|_| rng.gen_range(0..xs.len())).collect();
                let mut builder = Builder {
                    xs,
                    ys,
                    params,
                    n_candidates,
                    rng,
                };
                DecisionTree {
                    root: builder.build(&mut idx, 0),
                }
            })
            .collect();
        Ok(Self { n_features, trees })
    }

    /// Majority vote of per-tree decisions (`p_member > 0.5`); a tie votes non-member.
    pub fn predict(&self, x: &[f64]) -> Result<bool> {
        if x.len() != self.n_features {
            return Err(Error::shape("forest input", self.n_features, x.len()));
        }
        let votes = self.trees.iter().filter(|t| t.p_member(x) > 0.5).count();
        Ok(2 * votes > self.trees.len())
    }

    pub fn to_text(&self) -> String {
        fn write_node(out: &mut String, n: &Node) {
            match n {
                Node::Leaf { p_member } => {
                    let _ = writeln!(out, "leaf {p_member:.16e}");
                }
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let _ = writeln!(out, "node {feature} {threshold:.16e}");
                    write_node(out, left);
                    write_node(out, right);
                }
            }
        }
        let mut out = format!("forest v1 {} {}\n", self.trees.len(), self.n_features);
        for t in &self.trees {
            out.push_str("tree\n");
            write_node(&mut out, &t.root);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
        let perr = |line: usize, msg: String| Error::Parse { line: line + 1, msg };
        let (hl, header) = lines.next().ok_or_else(|| perr(0, "empty forest".into()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 4 || h[0] != "forest" || h[1] != "v1" {
            return Err(perr(hl, format!("bad forest header `{header}`")));
        }
        let n_trees: usize = h[2].parse().map_err(|_| perr(hl, "bad tree count".into()))?;
        let n_features: usize = h[3].parse().map_err(|_| perr(hl, "bad feature count".into()))?;

        fn parse_node<'a>(
            lines: &mut impl Iterator<Item = (usize, &'a str)>,
            n_features: usize,
            depth: usize,
        ) -> Result<Node> {
            let (i, line) = lines.next().ok_or(Error::Parse {
                line: 0,
                msg: "truncated tree".into(),
            })?;
            let perr = |msg: &str| Error::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            if depth > 64 {
                return Err(perr("tree too deep"));
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                ["leaf", p] => Ok(Node::Leaf {
                    p_member: p.parse().map_err(|_| perr("bad leaf value"))?,
                }),
                ["node", feat, thr] => {
                    let feature: usize = feat.parse().map_err(|_| perr("bad feature index"))?;
                    let threshold: f64 = thr.parse().map_err(|_| perr("bad threshold"))?;
                    if feature >= n_features || !threshold.is_finite() {
                        return Err(perr("split out of range"));
                    }
                    let left = parse_node(lines, n_features, depth + 1)?;
                    let right = parse_node(lines, n_features, depth + 1)?;
                    Ok(Node::Split {
                        feature,
                        threshold,
                        left: Box::new(left),
                        right: Box::new(right),
                    })
                }
                _ => Err(perr("expected `node` or `leaf`")),
            }
        }

        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            match lines.next() {
                Some((_, "tree")) => {}
                Some((i, other)) => return Err(perr(i, format!("expected `tree`, got `{other}`"))),
                None => return Err(perr(0, "missing tree".into())),
            }
            trees.push(DecisionTree {
                root: parse_node(&mut lines, n_features, 0)?,
            });
        }
        if let Some((i, _)) = lines.next() {
            return Err(perr(i, "unexpected trailing content".into()));
        }
        Ok(Self { n_features, trees })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..60 {
            let t = i as f64 / 60.0;
            xs.push(vec![t, 1.0 - t, (i % 7) as f64]);
            ys.push(usize::from(t > 0.5));
        }
        (xs, ys)
    }

    #[test]
    fn separable_toy_is_learned() {
        let (xs, ys) = toy();
        let forest = RandomForest::fit(&xs, &ys, &ForestParams::new(3)).unwrap();
        let correct = xs
            .iter()
            .zip(&ys)
            .filter(|(x, &y)| forest.predict(x).unwrap() == (y == 1))
            .count();
        assert!(correct as f64 / xs.len() as f64 >= 0.95);
        assert!(forest.trees.iter().all(|t| t.depth() <= 8));
        assert_eq!(forest, RandomForest::fit(&xs, &ys, &ForestParams::new(3)).unwrap());
    }

    #[test]
    fn text_round_trip() {
        let (xs, ys) = toy();
        let forest = RandomForest::fit(&xs, &ys, &ForestParams::new(9)).unwrap();
        let back = RandomForest::from_text(&forest.to_text()).unwrap();
        assert_eq!(back, forest);
        assert!(RandomForest::from_text("forest v1 1 3\ntree\nnode 5 0.5\nleaf 1\nleaf 0\n").is_err());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RandomForest::fit(&[], &[], &ForestParams::new(0)).is_err());
        assert!(RandomForest::fit(&[vec![1.0]], &[2], &ForestParams::new(0)).is_err());
    }
}
