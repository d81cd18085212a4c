//! NSGA-II search over configuration genotypes under a compute budget.

use std::cmp::Ordering;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dynet::{count_flops, from_genotype, gene_sizes, ArchConfig, SearchSpace};
use crate::error::{Error, Result};
use crate::rng::{component_rng, Rng};

/// A scored genotype. Objectives are maximized.
#[derive(Clone, Debug, PartialEq)]
pub struct Individual {
    pub genes: Vec<usize>,
    pub objectives: Vec<f64>,
    /// Compute cost in MFLOPs.
    pub mflops: f64,
    /// Amount by which `mflops` exceeds the budget; zero when feasible.
    pub violation: f64,
}

impl Individual {
    pub fn feasible(&self) -> bool {
        self.violation == 0.0
    }
}

/// Constrained domination: feasible beats infeasible, smaller violation
/// beats larger, and among feasible individuals Pareto dominance decides.
pub fn dominates(a: &Individual, b: &Individual) -> Result<bool> {
    if a.objectives.len() != b.objectives.len() {
        return Err(Error::Shape(format!("{} vs {} objectives", a.objectives.len(), b.objectives.len())));
    }
    Ok(match (a.feasible(), b.feasible()) {
        (true, false) => true,
        (false, true) => false,
        (false, false) => a.violation < b.violation,
        (true, true) => {
            let mut strict = false;
            for (x, y) in a.objectives.iter().zip(&b.objectives) {
                if x < y {
                    return Ok(false);
                }
                strict |= x > y;
            }
            strict
        }
    })
}

/// Partitions `pop` into fronts of indices, best first.
pub fn fast_nondominated_sort(pop: &[Individual]) -> Result<Vec<Vec<usize>>> {
    let n = pop.len();
    let mut dominated_by_me: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut count = vec![0usize; n];
    for i in 0..n {
        for j in i + 1..n {
            if dominates(&pop[i], &pop[j])? {
                dominated_by_me[i].push(j);
                count[j] += 1;
            } else if dominates(&pop[j], &pop[i])? {
                dominated_by_me[j].push(i);
                count[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominated_by_me[i] {
                count[j] -= 1;
                if count[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    Ok(fronts)
}

/// Crowding distance of each member of a front, normalized per objective.
pub fn crowding_distance(front: &[&Individual]) -> Vec<f64> {
    let n = front.len();
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let mut dist = vec![0.0; n];
    let m = front[0].objectives.len();
    for k in 0..m {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| front[a].objectives[k].total_cmp(&front[b].objectives[k]).then(a.cmp(&b)));
        let lo = front[order[0]].objectives[k];
        let hi = front[order[n - 1]].objectives[k];
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        if hi > lo {
            for w in order.windows(3) {
                dist[w[1]] += (front[w[2]].objectives[k] - front[w[0]].objectives[k]) / (hi - lo);
            }
        }
    }
    dist
}

/// A first front with its crowding distances.
#[derive(Clone, Debug, PartialEq)]
pub struct Front {
    pub members: Vec<Individual>,
    pub crowding: Vec<f64>,
}

impl Front {
    fn of(pop: &[Individual], idx: &[usize]) -> Self {
        let members: Vec<Individual> = idx.iter().map(|&i| pop[i].clone()).collect();
        let crowding = crowding_distance(&members.iter().collect::<Vec<_>>());
        Self { members, crowding }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rates {
    pub crossover: f64,
    pub mutation: f64,
}

/// Uniform crossover (each slot swapped with probability `crossover`), then
/// per-slot mutation to a different choice with probability `mutation`.
pub fn vary(a: &[usize], b: &[usize], sizes: &[usize], rates: Rates, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let (mut x, mut y) = (a.to_vec(), b.to_vec());
    for i in 0..sizes.len() {
        if rng.random::<f64>() < rates.crossover {
            std::mem::swap(&mut x[i], &mut y[i]);
        }
    }
    for g in [&mut x, &mut y] {
        for (v, &s) in g.iter_mut().zip(sizes) {
            if rng.random::<f64>() < rates.mutation && s > 1 {
                let r = rng.random_range(0..s - 1);
                *v = if r >= *v { r + 1 } else { r };
            }
        }
    }
    (x, y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(default = "defaults::population")]
    pub population: usize,
    #[serde(default = "defaults::generations")]
    pub generations: usize,
    #[serde(default = "defaults::mutation")]
    pub mutation: f64,
    #[serde(default = "defaults::crossover")]
    pub crossover: f64,
    /// Budget in MFLOPs; configurations above it are infeasible.
    pub flops_limit: f64,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn population() -> usize {
        64
    }
    pub fn generations() -> usize {
        100
    }
    pub fn mutation() -> f64 {
        0.1
    }
    pub fn crossover() -> f64 {
        0.5
    }
}

impl SearchConfig {
    pub fn new(flops_limit: f64, seed: u64) -> Self {
        Self {
            population: defaults::population(),
            generations: defaults::generations(),
            mutation: defaults::mutation(),
            crossover: defaults::crossover(),
            flops_limit,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population < 4 || self.population % 2 != 0 {
            return Err(Error::Invalid(format!("population must be even and at least 4, got {}", self.population)));
        }
        for (n, r) in [("mutation", self.mutation), ("crossover", self.crossover)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Invalid(format!("{n} rate {r} outside [0, 1]")));
            }
        }
        if !(self.flops_limit > 0.0) || !self.flops_limit.is_finite() {
            return Err(Error::Invalid(format!("flops limit {} must be positive", self.flops_limit)));
        }
        Ok(())
    }
}

/// Population after one generation, with the indices of its first front.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub population: Vec<Individual>,
    pub first_front: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    /// Final population, best fronts first; infeasible members are dropped
    /// whenever a feasible one exists.
    pub population: Vec<Individual>,
    pub front: Front,
    /// Entry 0 is the initial population, entry `g` the survivors of generation `g`.
    pub history: Vec<Generation>,
}

/// Scores configurations; larger is better in every component.
pub type Fitness<'a> = dyn Fn(&ArchConfig) -> Result<Vec<f64>> + 'a;

const INIT_RETRIES: usize = 10;

struct Evaluator<'a> {
    space: &'a SearchSpace,
    fitness: &'a Fitness<'a>,
    limit: f64,
}

impl Evaluator<'_> {
    fn eval(&self, genes: Vec<usize>) -> Result<Individual> {
        let config = from_genotype(self.space, &genes)?;
        let objectives = (self.fitness)(&config)?;
        if objectives.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("fitness of {config}")));
        }
        let mflops = count_flops(self.space, &config, self.space.input)?.mflops();
        Ok(Individual { genes, objectives, mflops, violation: (mflops - self.limit).max(0.0) })
    }
}

fn random_genes(sizes: &[usize], rng: &mut Rng) -> Vec<usize> {
    sizes.iter().map(|&s| rng.random_range(0..s)).collect()
}

/// Rank of every member and crowding within its front.
fn rank_and_crowd(pop: &[Individual]) -> Result<(Vec<Vec<usize>>, Vec<usize>, Vec<f64>)> {
    let fronts = fast_nondominated_sort(pop)?;
    let mut rank = vec![0; pop.len()];
    let mut crowd = vec![0.0; pop.len()];
    for (r, f) in fronts.iter().enumerate() {
        let members: Vec<&Individual> = f.iter().map(|&i| &pop[i]).collect();
        for (&i, d) in f.iter().zip(crowding_distance(&members)) {
            rank[i] = r;
            crowd[i] = d;
        }
    }
    Ok((fronts, rank, crowd))
}

fn better(i: usize, j: usize, rank: &[usize], crowd: &[f64]) -> bool {
    match rank[i].cmp(&rank[j]) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => crowd[i] >= crowd[j],
    }
}

/// Keeps the best `n` of `pop`, front by front, breaking the last front by crowding.
fn truncate(pop: Vec<Individual>, n: usize) -> Result<Vec<Individual>> {
    let (fronts, _, crowd) = rank_and_crowd(&pop)?;
    let mut keep = Vec::with_capacity(n);
    for f in fronts {
        if keep.len() + f.len() <= n {
            keep.extend(f);
        } else {
            let mut f = f;
            f.sort_by(|&a, &b| crowd[b].total_cmp(&crowd[a]).then(a.cmp(&b)));
            keep.extend(f.into_iter().take(n - keep.len()));
        }
        if keep.len() == n {
            break;
        }
    }
    let mut slots: Vec<Option<Individual>> = pop.into_iter().map(Some).collect();
    Ok(keep.into_iter().map(|i| slots[i].take().expect("distinct indices")).collect())
}

fn snapshot(pop: &[Individual]) -> Result<Generation> {
    let first_front = fast_nondominated_sort(pop)?.into_iter().next().unwrap_or_default();
    Ok(Generation { population: pop.to_vec(), first_front })
}

/// Runs NSGA-II and returns the final population with its first front.
pub fn search(space: &SearchSpace, fitness: &Fitness<'_>, cfg: &SearchConfig) -> Result<SearchResult> {
    cfg.validate()?;
    let sizes = gene_sizes(space);
    let ev = Evaluator { space, fitness, limit: cfg.flops_limit };
    let mut rng = component_rng(cfg.seed, "search");
    let rates = Rates { crossover: cfg.crossover, mutation: cfg.mutation };

    let mut pop = Vec::with_capacity(cfg.population);
    for _ in 0..cfg.population {
        let mut ind = ev.eval(random_genes(&sizes, &mut rng))?;
        for _ in 0..INIT_RETRIES {
            if ind.feasible() {
                break;
            }
            ind = ev.eval(random_genes(&sizes, &mut rng))?;
        }
        pop.push(ind);
    }
    pop = truncate(pop, cfg.population)?;
    let mut history = vec![snapshot(&pop)?];

    for _ in 0..cfg.generations {
        let (_, rank, crowd) = rank_and_crowd(&pop)?;
        let tournament = |rng: &mut Rng| {
            let (i, j) = (rng.random_range(0..pop.len()), rng.random_range(0..pop.len()));
            if better(i, j, &rank, &crowd) { i } else { j }
        };
        let mut offspring = Vec::with_capacity(cfg.population);
        while offspring.len() < cfg.population {
            let (a, b) = (tournament(&mut rng), tournament(&mut rng));
            let (x, y) = vary(&pop[a].genes, &pop[b].genes, &sizes, rates, &mut rng);
            offspring.push(ev.eval(x)?);
            offspring.push(ev.eval(y)?);
        }
        pop.extend(offspring);
        pop = truncate(pop, cfg.population)?;
        history.push(snapshot(&pop)?);
    }

    let last = history.last().expect("initial generation");
    let front = Front::of(&pop, &last.first_front);
    if pop.iter().any(Individual::feasible) {
        pop.retain(Individual::feasible);
    }
    Ok(SearchResult { population: pop, front, history })
}

/// The configuration each genotype in `front` decodes to.
pub fn front_configs(space: &SearchSpace, front: &Front) -> Result<Vec<ArchConfig>> {
    front.members.iter().map(|m| from_genotype(space, &m.genes)).collect()
}
