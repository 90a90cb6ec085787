//! Structural analysis of square equation systems: maximum bipartite
//! matching and block-lower-triangular (BLT) ordering.
//!
//! The ordering follows Duff and Reid: find a perfect matching between
//! equations and unknowns, orient the incidence graph along the matching, and
//! emit its strongly connected components in dependency order. Solving the
//! blocks in that order only ever needs values from earlier blocks.

use thiserror::Error;

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum IncidenceError {
    #[error("incidence graph is not square ({equations} equations, {variables} variables)")]
    NotSquare { equations: usize, variables: usize },
    #[error("structurally singular: maximum matching covers {matched} of {size} equations")]
    StructurallySingular { matched: usize, size: usize },
    #[error("equation {equation} references variable {variable} out of range")]
    IndexOutOfRange { equation: usize, variable: usize },
}

/// Bipartite adjacency from equations to the variables they reference.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IncidenceGraph {
    num_vars: usize,
    adj: Vec<Vec<usize>>,
}

impl IncidenceGraph {
    /// Builds the graph; each row is sorted and deduplicated.
    pub fn new(num_vars: usize, mut adj: Vec<Vec<usize>>) -> Result<Self, IncidenceError> {
        for (equation, row) in adj.iter_mut().enumerate() {
            row.sort_unstable();
            row.dedup();
            if let Some(&variable) = row.iter().find(|&&v| v >= num_vars) {
                return Err(IncidenceError::IndexOutOfRange { equation, variable });
            }
        }
        Ok(IncidenceGraph { num_vars, adj })
    }

    pub fn num_equations(&self) -> usize {
        self.adj.len()
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn row(&self, eq: usize) -> &[usize] {
        &self.adj[eq]
    }

    pub fn nonzeros(&self) -> usize {
        self.adj.iter().map(Vec::len).sum()
    }
}

/// Perfect matching; `eq_to_var[i]` is the unknown assigned to equation `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Matching {
    pub eq_to_var: Vec<usize>,
    pub var_to_eq: Vec<usize>,
}

/// Perfect matching by repeated augmenting-path search.
pub fn maximum_matching(g: &IncidenceGraph) -> Result<Matching, IncidenceError> {
    let n = g.num_equations();
    if n != g.num_vars() {
        return Err(IncidenceError::NotSquare { equations: n, variables: g.num_vars() });
    }
    let mut var_to_eq: Vec<Option<usize>> = vec![None; n];
    let mut eq_to_var: Vec<Option<usize>> = vec![None; n];

    // cheap greedy pass first
    for eq in 0..n {
        if let Some(&v) = g.row(eq).iter().find(|&&v| var_to_eq[v].is_none()) {
            var_to_eq[v] = Some(eq);
            eq_to_var[eq] = Some(v);
        }
    }

    let mut visited = vec![usize::MAX; n];
    for root in 0..n {
        if eq_to_var[root].is_some() {
            continue;
        }
        // depth-first search for an augmenting path, iterative
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        let mut path_vars: Vec<usize> = Vec::new();
        let mut found = false;
        visited[root] = root;
        while let Some(&mut (eq, ref mut next)) = stack.last_mut() {
            let row = g.row(eq);
            if *next >= row.len() {
                stack.pop();
                path_vars.pop();
                continue;
            }
            let v = row[*next];
            *next += 1;
            match var_to_eq[v] {
                None => {
                    path_vars.push(v);
                    found = true;
                    break;
                }
                Some(other) if visited[other] != root => {
                    visited[other] = root;
                    path_vars.push(v);
                    stack.push((other, 0));
                }
                Some(_) => {}
            }
        }
        if found {
            // stack holds equations, path_vars the variable taken from each
            for (k, &(eq, _)) in stack.iter().enumerate() {
                let v = path_vars[k];
                var_to_eq[v] = Some(eq);
                eq_to_var[eq] = Some(v);
            }
        }
    }

    let matched = eq_to_var.iter().filter(|m| m.is_some()).count();
    if matched < n {
        return Err(IncidenceError::StructurallySingular { matched, size: n });
    }
    Ok(Matching {
        eq_to_var: eq_to_var.into_iter().map(Option::unwrap).collect(),
        var_to_eq: var_to_eq.into_iter().map(Option::unwrap).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub equations: Vec<usize>,
    pub variables: Vec<usize>,
}

impl Block {
    pub fn size(&self) -> usize {
        self.equations.len()
    }
}

/// Block-lower-triangular ordering of a square system.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BltPartition {
    pub blocks: Vec<Block>,
    /// `row_perm[k]` is the equation placed at permuted row `k`.
    pub row_perm: Vec<usize>,
    /// `col_perm[k]` is the variable placed at permuted column `k`.
    pub col_perm: Vec<usize>,
}

impl BltPartition {
    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(Block::size).collect()
    }
}

pub fn block_triangularize(g: &IncidenceGraph) -> Result<BltPartition, IncidenceError> {
    let matching = maximum_matching(g)?;
    let n = g.num_equations();

    // Equation i depends on equation j when i references the variable matched
    // to j. Tarjan emits a component only after everything it reaches, which
    // is exactly the solve order.
    let deps: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            g.row(i)
                .iter()
                .map(|&v| matching.var_to_eq[v])
                .filter(|&j| j != i)
                .collect()
        })
        .collect();

    let components = tarjan(&deps);
    let mut blocks = Vec::with_capacity(components.len());
    let mut row_perm = Vec::with_capacity(n);
    let mut col_perm = Vec::with_capacity(n);
    for mut eqs in components {
        eqs.sort_unstable();
        let vars: Vec<usize> = eqs.iter().map(|&e| matching.eq_to_var[e]).collect();
        row_perm.extend_from_slice(&eqs);
        col_perm.extend_from_slice(&vars);
        blocks.push(Block { equations: eqs, variables: vars });
    }
    Ok(BltPartition { blocks, row_perm, col_perm })
}

fn tarjan(deps: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = deps.len();
    const UNSEEN: usize = usize::MAX;
    let mut index = vec![UNSEEN; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    let mut counter = 0;

    for root in 0..n {
        if index[root] != UNSEEN {
            continue;
        }
        let mut call: Vec<(usize, usize)> = vec![(root, 0)];
        index[root] = counter;
        low[root] = counter;
        counter += 1;
        stack.push(root);
        on_stack[root] = true;

        while let Some(&mut (v, ref mut next)) = call.last_mut() {
            if *next < deps[v].len() {
                let w = deps[v][*next];
                *next += 1;
                if index[w] == UNSEEN {
                    index[w] = counter;
                    low[w] = counter;
                    counter += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            call.pop();
            if let Some(&(parent, _)) = call.last() {
                low[parent] = low[parent].min(low[v]);
            }
            if low[v] == index[v] {
                let mut comp = Vec::new();
                loop {
                    let w = stack.pop().unwrap();
                    on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                out.push(comp);
            }
        }
    }
    out
}

/// Violations of the BLT invariants, empty when the partition is valid.
pub fn partition_violations(g: &IncidenceGraph, p: &BltPartition) -> Vec<String> {
    let n = g.num_equations();
    let mut problems = Vec::new();
    let is_perm = |perm: &[usize]| {
        let mut seen = vec![false; n];
        perm.len() == n && perm.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
    };
    if !is_perm(&p.row_perm) {
        problems.push("row permutation is not a bijection".to_string());
    }
    if !is_perm(&p.col_perm) {
        problems.push("column permutation is not a bijection".to_string());
    }
    if !problems.is_empty() {
        return problems;
    }
    let mut eq_block = vec![0; n];
    let mut var_block = vec![0; n];
    let mut total = 0;
    for (b, block) in p.blocks.iter().enumerate() {
        if block.equations.len() != block.variables.len() {
            problems.push(format!("block {b} is not square"));
        }
        total += block.size();
        for &e in &block.equations {
            eq_block[e] = b;
        }
        for &v in &block.variables {
            var_block[v] = b;
        }
    }
    if total != n {
        problems.push(format!("block sizes sum to {total}, expected {n}"));
        return problems;
    }
    for e in 0..n {
        for &v in g.row(e) {
            if var_block[v] > eq_block[e] {
                problems.push(format!("nonzero ({e},{v}) above the block diagonal"));
            }
        }
    }
    // strong connectivity of each block under the matching orientation
    for (b, block) in p.blocks.iter().enumerate() {
        if block.size() <= 1 {
            continue;
        }
        let owner: std::collections::HashMap<usize, usize> =
            block.variables.iter().zip(&block.equations).map(|(&v, &e)| (v, e)).collect();
        let local: std::collections::HashMap<usize, usize> =
            block.equations.iter().enumerate().map(|(k, &e)| (e, k)).collect();
        let succ = |e: usize| -> Vec<usize> {
            g.row(e).iter().filter_map(|v| owner.get(v)).map(|x| local[x]).collect()
        };
        let m = block.size();
        let reach = |forward: bool| {
            let mut seen = vec![false; m];
            let mut todo = vec![0usize];
            seen[0] = true;
            while let Some(k) = todo.pop() {
                let next: Vec<usize> = if forward {
                    succ(block.equations[k])
                } else {
                    (0..m).filter(|&j| succ(block.equations[j]).contains(&k)).collect()
                };
                for j in next {
                    if !seen[j] {
                        seen[j] = true;
                        todo.push(j);
                    }
                }
            }
            seen.iter().all(|&s| s)
        };
        if !reach(true) || !reach(false) {
            problems.push(format!("block {b} is not strongly connected"));
        }
    }
    problems
}

/// Incidence matrix in permuted coordinates, ready for plotting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IncidenceReport {
    pub size: usize,
    /// `(row, col)` in permuted coordinates.
    pub nonzeros: Vec<(usize, usize)>,
    /// Start offset of every block, followed by `size`.
    pub block_bounds: Vec<usize>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
}

pub fn incidence_report(
    g: &IncidenceGraph,
    p: &BltPartition,
    row_names: &[String],
    col_names: &[String],
) -> IncidenceReport {
    let n = g.num_equations();
    let mut row_pos = vec![0; n];
    let mut col_pos = vec![0; n];
    for (k, &e) in p.row_perm.iter().enumerate() {
        row_pos[e] = k;
    }
    for (k, &v) in p.col_perm.iter().enumerate() {
        col_pos[v] = k;
    }
    let mut nonzeros: Vec<(usize, usize)> = (0..n)
        .flat_map(|e| g.row(e).iter().map(move |&v| (e, v)))
        .map(|(e, v)| (row_pos[e], col_pos[v]))
        .collect();
    nonzeros.sort_unstable();
    let mut block_bounds = Vec::with_capacity(p.blocks.len() + 1);
    let mut start = 0;
    for b in &p.blocks {
        block_bounds.push(start);
        start += b.size();
    }
    block_bounds.push(start);
    let label = |names: &[String], i: usize| names.get(i).cloned().unwrap_or_else(|| i.to_string());
    IncidenceReport {
        size: n,
        nonzeros,
        block_bounds,
        row_labels: p.row_perm.iter().map(|&e| label(row_names, e)).collect(),
        col_labels: p.col_perm.iter().map(|&v| label(col_names, v)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn graph(n: usize, rows: &[&[usize]]) -> IncidenceGraph {
        IncidenceGraph::new(n, rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn identity_pattern_matches_fully() {
        let g = graph(4, &[&[0], &[1], &[2], &[3]]);
        let m = maximum_matching(&g).unwrap();
        assert_eq!(m.eq_to_var, vec![0, 1, 2, 3]);
    }

    #[test]
    fn duplicated_dependence_is_singular() {
        let g = graph(2, &[&[0], &[0]]);
        assert_eq!(
            maximum_matching(&g).unwrap_err(),
            IncidenceError::StructurallySingular { matched: 1, size: 2 }
        );
    }

    #[test]
    fn augmenting_path_is_needed() {
        // greedy matches eq0-v0 and then eq1 must steal v0
        let g = graph(2, &[&[0, 1], &[0]]);
        let m = maximum_matching(&g).unwrap();
        assert_eq!(m.eq_to_var, vec![1, 0]);
    }

    #[test]
    fn non_square_rejected() {
        let g = graph(3, &[&[0], &[1]]);
        assert!(matches!(maximum_matching(&g), Err(IncidenceError::NotSquare { .. })));
    }

    #[test]
    fn diagonal_gives_singleton_blocks() {
        let g = graph(3, &[&[0], &[1], &[2]]);
        let p = block_triangularize(&g).unwrap();
        assert_eq!(p.block_sizes(), vec![1, 1, 1]);
        assert!(partition_violations(&g, &p).is_empty());
    }

    #[test]
    fn dense_gives_one_block() {
        let g = graph(3, &[&[0, 1, 2], &[0, 1, 2], &[0, 1, 2]]);
        let p = block_triangularize(&g).unwrap();
        assert_eq!(p.block_sizes(), vec![3]);
        assert!(partition_violations(&g, &p).is_empty());
    }

    #[test]
    fn lower_triangular_chain_is_ordered() {
        // eq0: v2 ; eq1: v2, v0 ; eq2: v0, v1
        let g = graph(3, &[&[2], &[2, 0], &[0, 1]]);
        let p = block_triangularize(&g).unwrap();
        assert_eq!(p.row_perm, vec![0, 1, 2]);
        assert_eq!(p.col_perm, vec![2, 0, 1]);
    }

    #[test]
    fn report_uses_permuted_coordinates() {
        let g = graph(3, &[&[0, 1], &[0, 1], &[1, 2]]);
        let p = block_triangularize(&g).unwrap();
        let r = incidence_report(&g, &p, &[], &[]);
        assert_eq!(r.block_bounds, vec![0, 2, 3]);
        let mut blk = [0; 3];
        for b in 0..r.block_bounds.len() - 1 {
            for k in r.block_bounds[b]..r.block_bounds[b + 1] {
                blk[k] = b;
            }
        }
        assert!(r.nonzeros.iter().all(|&(i, j)| blk[j] <= blk[i]));
        assert_eq!(r.nonzeros.len(), g.nonzeros());
    }

    fn planted() -> impl Strategy<Value = IncidenceGraph> {
        (1usize..40).prop_flat_map(|n| {
            (
                Just(n),
                Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
                proptest::collection::vec(proptest::collection::vec(0..n, 0..4), n),
            )
                .prop_map(|(n, perm, extra)| {
                    let adj = extra
                        .into_iter()
                        .enumerate()
                        .map(|(i, mut row)| {
                            row.push(perm[i]);
                            row
                        })
                        .collect();
                    IncidenceGraph::new(n, adj).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn planted_matchings_yield_valid_partitions(g in planted()) {
            let p = block_triangularize(&g).unwrap();
            let v = partition_violations(&g, &p);
            prop_assert!(v.is_empty(), "{:?}", v);
            prop_assert_eq!(block_triangularize(&g).unwrap(), p);
        }
    }
}
