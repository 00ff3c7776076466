use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ir::{Graph, GraphError, TensorId};

pub const ALIGNMENT: usize = 16;

/// Steps during which a tensor must stay resident, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lifetime {
    pub tensor_id: TensorId,
    pub first_use: usize,
    pub last_use: usize,
    pub size_bytes: usize,
}

impl Lifetime {
    pub fn overlaps(&self, other: &Lifetime) -> bool {
        self.first_use <= other.last_use && other.first_use <= self.last_use
    }

    pub fn is_live_at(&self, step: usize) -> bool {
        self.first_use <= step && step <= self.last_use
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArenaPlan {
    pub offsets: BTreeMap<TensorId, usize>,
    pub total_bytes: usize,
    /// Step with the highest watermark.
    pub peak_step: usize,
}

fn align_up(n: usize, a: usize) -> usize {
    n.div_ceil(a) * a
}

/// Lifetimes of the graph input and every node output, in tensor id order.
/// Sizes are padded to [`ALIGNMENT`].
pub fn tensor_lifetimes(g: &Graph) -> Result<Vec<Lifetime>, GraphError> {
    g.validate()?;
    let last_step = g.nodes.len();
    let mut first: BTreeMap<TensorId, usize> = BTreeMap::new();
    first.insert(g.input_id, 0);
    for (i, n) in g.nodes.iter().enumerate() {
        for &t in &n.outputs {
            first.insert(t, i + 1);
        }
    }
    let mut last: BTreeMap<TensorId, usize> = first.clone();
    for (i, n) in g.nodes.iter().enumerate() {
        for &t in &n.inputs {
            last.insert(t, i + 1);
        }
    }
    for &t in &g.output_ids {
        last.insert(t, last_step);
    }
    let consumers = g.consumers();
    let mut out = Vec::with_capacity(first.len());
    for (&t, &f) in &first {
        let spec = g.tensor(t)?;
        if t != g.input_id && !consumers.contains_key(&t) && !g.output_ids.contains(&t) {
            log::warn!("tensor {t} is produced but never used");
        }
        out.push(Lifetime {
            tensor_id: t,
            first_use: f,
            last_use: last[&t],
            size_bytes: align_up(spec.size_bytes().max(1), ALIGNMENT),
        });
    }
    Ok(out)
}

/// Maximum over steps of the summed size of live tensors; no placement
/// can use less.
pub fn lower_bound(lifetimes: &[Lifetime]) -> usize {
    let last = lifetimes.iter().map(|l| l.last_use).max().unwrap_or(0);
    (0..=last)
        .map(|s| {
            lifetimes
                .iter()
                .filter(|l| l.is_live_at(s))
                .map(|l| l.size_bytes)
                .sum::<usize>()
        })
        .max()
        .unwrap_or(0)
}

/// Greedy best-fit placement: largest tensors first (ties by first use,
/// then id), each at the lowest aligned offset that does not collide with
/// an already placed, lifetime-overlapping tensor.
pub fn plan_arena(lifetimes: &[Lifetime], alignment: usize) -> ArenaPlan {
    let alignment = alignment.max(1);
    let mut order: Vec<&Lifetime> = lifetimes.iter().collect();
    order.sort_by(|a, b| {
        b.size_bytes
            .cmp(&a.size_bytes)
            .then(a.first_use.cmp(&b.first_use))
            .then(a.tensor_id.cmp(&b.tensor_id))
    });
    let mut placed: Vec<(&Lifetime, usize)> = Vec::with_capacity(order.len());
    for l in order {
        let size = align_up(l.size_bytes, alignment);
        let mut conflicts: Vec<(usize, usize)> = placed
            .iter()
            .filter(|(p, _)| p.overlaps(l))
            .map(|(p, off)| (*off, off + align_up(p.size_bytes, alignment)))
            .collect();
        conflicts.sort_unstable();
        let mut offset = 0;
        for (start, end) in conflicts {
            if offset + size <= start {
                break;
            }
            offset = offset.max(align_up(end, alignment));
        }
        placed.push((l, offset));
    }

    let offsets: BTreeMap<TensorId, usize> =
        placed.iter().map(|(l, o)| (l.tensor_id, *o)).collect();
    let last = lifetimes.iter().map(|l| l.last_use).max().unwrap_or(0);
    let (mut total, mut peak) = (0, 0);
    for step in 0..=last {
        let mark = placed
            .iter()
            .filter(|(l, _)| l.is_live_at(step))
            .map(|(l, o)| o + align_up(l.size_bytes, alignment))
            .max()
            .unwrap_or(0);
        if mark > total {
            total = mark;
            peak = step;
        }
    }
    ArenaPlan {
        offsets,
        total_bytes: total,
        peak_step: peak,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lt(id: TensorId, f: usize, l: usize, size: usize) -> Lifetime {
        Lifetime {
            tensor_id: id,
            first_use: f,
            last_use: l,
            size_bytes: size,
        }
    }

    fn overlapping_pairs_disjoint(ls: &[Lifetime], p: &ArenaPlan) -> bool {
        ls.iter().enumerate().all(|(i, a)| {
            ls[i + 1..].iter().all(|b| {
                !a.overlaps(b) || {
                    let (oa, ob) = (p.offsets[&a.tensor_id], p.offsets[&b.tensor_id]);
                    oa + a.size_bytes <= ob || ob + b.size_bytes <= oa
                }
            })
        })
    }

    #[test]
    fn single_tensor() {
        let ls = [lt(0, 0, 0, align_up(1000, 16))];
        assert_eq!(plan_arena(&ls, 16).total_bytes, 1008);
    }

    /// Smallest arena over every placement of up to three tensors on the
    /// alignment grid.
    fn brute_force(ls: &[Lifetime], unit: usize) -> usize {
        let sum: usize = ls.iter().map(|l| l.size_bytes).sum();
        let slots = sum / unit + 1;
        let mut best = usize::MAX;
        let n = ls.len();
        let mut offs = vec![0usize; n];
        loop {
            let ok = (0..n).all(|i| {
                (i + 1..n).all(|j| {
                    !ls[i].overlaps(&ls[j])
                        || offs[i] * unit + ls[i].size_bytes <= offs[j] * unit
                        || offs[j] * unit + ls[j].size_bytes <= offs[i] * unit
                })
            });
            if ok {
                let top = (0..n)
                    .map(|i| offs[i] * unit + ls[i].size_bytes)
                    .max()
                    .unwrap_or(0);
                best = best.min(top);
            }
            let mut k = 0;
            while k < n {
                offs[k] += 1;
                if offs[k] < slots {
                    break;
                }
                offs[k] = 0;
                k += 1;
            }
            if k == n {
                return best;
            }
        }
    }

    #[test]
    fn chain_matches_brute_force() {
        // A(100)->B(200)->C(50) in units of 16 bytes
        let unit = 16;
        let ls = [
            lt(0, 0, 1, 100 * unit),
            lt(1, 1, 2, 200 * unit),
            lt(2, 2, 2, 50 * unit),
        ];
        let p = plan_arena(&ls, unit);
        assert_eq!(p.total_bytes, 300 * unit);
        assert_eq!(p.offsets[&2], p.offsets[&0]);
        let small = [
            lt(0, 0, 1, 2 * unit),
            lt(1, 1, 2, 4 * unit),
            lt(2, 2, 2, unit),
        ];
        assert_eq!(
            plan_arena(&small, unit).total_bytes,
            brute_force(&small, unit)
        );
    }

    #[test]
    fn chain_lifetimes() {
        use crate::ir::{GraphBuilder, Metadata, Region};
        let mut b = GraphBuilder::new([1, 1, 4, 4]);
        let a = b.input();
        let x = b.silu("op1", a, Region::Backbone).unwrap();
        let y = b.silu("op2", x, Region::Backbone).unwrap();
        let g = b.finish(vec![y], Metadata::default()).unwrap();
        let ls = tensor_lifetimes(&g).unwrap();
        let spans: Vec<_> = ls.iter().map(|l| (l.first_use, l.last_use)).collect();
        assert_eq!(spans, vec![(0, 1), (1, 2), (2, 2)]);
    }

    #[test]
    fn diamond_keeps_split_alive() {
        use crate::ir::{GraphBuilder, Metadata, Region};
        let mut b = GraphBuilder::new([1, 1, 4, 4]);
        let s = b.silu("split", b.input(), Region::Backbone).unwrap();
        let l = b.silu("left", s, Region::Backbone).unwrap();
        let r = b.sigmoid("right", s, Region::Backbone).unwrap();
        let m = b.add("merge", l, r, Region::Backbone).unwrap();
        let g = b.finish(vec![m], Metadata::default()).unwrap();
        let ls = tensor_lifetimes(&g).unwrap();
        let split = ls.iter().find(|x| x.tensor_id == s).unwrap();
        assert_eq!((split.first_use, split.last_use), (1, 3));
    }

    fn arb_lifetimes() -> impl Strategy<Value = Vec<Lifetime>> {
        prop::collection::vec((0usize..12, 0usize..6, 1usize..40), 1..10).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (f, d, s))| lt(i as TensorId, f, f + d, s * 16))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn plan_is_valid_and_near_optimal(ls in arb_lifetimes()) {
            let p = plan_arena(&ls, 16);
            prop_assert!(overlapping_pairs_disjoint(&ls, &p));
            let lb = lower_bound(&ls);
            prop_assert!(p.total_bytes >= lb);
            prop_assert!(p.total_bytes <= 2 * lb);
            prop_assert!(p.offsets.values().all(|o| o % 16 == 0));
        }

        #[test]
        fn greedy_never_beats_brute_force(ls in prop::collection::vec((0usize..4, 0usize..3, 1usize..5), 1..4)) {
            let ls: Vec<Lifetime> = ls.into_iter().enumerate()
                .map(|(i, (f, d, s))| lt(i as TensorId, f, f + d, s * 16)).collect();
            let p = plan_arena(&ls, 16);
            let best = brute_force(&ls, 16);
            prop_assert!(p.total_bytes >= best);
        }
    }
}
