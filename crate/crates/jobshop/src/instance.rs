//! JSSP instances: OR-library parsing, validation, random generation.
//!
//! An instance is `n_jobs` jobs that each visit all `n_machines` machines
//! exactly once, in a fixed per-job order, with positive integer processing
//! times. The file layout is the classic OR-library one: a header line
//! `n m`, then one line per job holding `m` whitespace-separated
//! `machine duration` pairs (machines 0-based).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

const FT06_TEXT: &str = include_str!("../data/ft06.txt");
const FT10_TEXT: &str = include_str!("../data/ft10.txt");

/// Static problem data for one job-shop instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JsspInstance {
    pub n_jobs: usize,
    pub n_machines: usize,
    /// `machine_of[job][pos]` — machine required by the `pos`-th operation of `job`.
    pub machine_of: Vec<Vec<usize>>,
    /// `proc_time[job][pos]` — processing time of that operation, always >= 1.
    pub proc_time: Vec<Vec<u64>>,
    pub name: String,
    pub known_optimum: Option<u64>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {line}: malformed header, expected two positive integers `n m`")]
    BadHeader { line: usize },
    #[error("line {line}: expected {expected} `machine duration` pairs ({} integers), found {found}", expected * 2)]
    WrongPairCount {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: processing time {value} is not a positive integer")]
    NonPositiveDuration { line: usize, value: i64 },
    #[error("line {line}: machine index {machine} out of range (instance has {n_machines} machines)")]
    MachineOutOfRange {
        line: usize,
        machine: i64,
        n_machines: usize,
    },
    #[error("line {line}: machine {machine} appears twice in the same job")]
    RepeatedMachine { line: usize, machine: usize },
    #[error("line {line}: expected an integer, found `{token}`")]
    BadToken { line: usize, token: String },
    #[error("expected {expected} job lines, found {found}")]
    MissingJobs { expected: usize, found: usize },
    #[error("line {line}: unexpected trailing content after the last job line")]
    TrailingContent { line: usize },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GenerateError {
    #[error("jobs and machines must both be >= 1 (got {n_jobs}x{n_machines})")]
    EmptyShape { n_jobs: usize, n_machines: usize },
    #[error("invalid duration bounds: need 1 <= p_min <= p_max, got [{p_min}, {p_max}]")]
    BadBounds { p_min: u64, p_max: u64 },
}

impl JsspInstance {
    /// Total operation count `n_jobs * n_machines`.
    pub fn n_ops(&self) -> usize {
        self.n_jobs * self.n_machines
    }

    /// Node id of operation `(job, pos)`.
    pub fn op_id(&self, job: usize, pos: usize) -> usize {
        job * self.n_machines + pos
    }

    /// Inverse of [`op_id`](Self::op_id).
    pub fn op_of(&self, id: usize) -> (usize, usize) {
        (id / self.n_machines, id % self.n_machines)
    }

    pub fn machine(&self, job: usize, pos: usize) -> usize {
        self.machine_of[job][pos]
    }

    pub fn proc(&self, job: usize, pos: usize) -> u64 {
        self.proc_time[job][pos]
    }

    /// Largest processing time anywhere in the instance.
    pub fn max_processing_time(&self) -> u64 {
        self.proc_time
            .iter()
            .flat_map(|row| row.iter().copied())
            .max()
            .expect("instance has at least one operation")
    }

    /// Sum of processing times of operations `pos..` of `job`.
    pub fn remaining_work(&self, job: usize, pos: usize) -> u64 {
        self.proc_time[job][pos..].iter().sum()
    }

    /// The six-job Fisher-Thompson benchmark (optimal makespan 55).
    pub fn ft06() -> Self {
        let mut inst = parse_instance(FT06_TEXT).expect("bundled ft06 parses");
        inst.name = "ft06".into();
        inst.known_optimum = Some(55);
        inst
    }

    /// The ten-job Fisher-Thompson benchmark (optimal makespan 930).
    pub fn ft10() -> Self {
        let mut inst = parse_instance(FT10_TEXT).expect("bundled ft10 parses");
        inst.name = "ft10".into();
        inst.known_optimum = Some(930);
        inst
    }

    /// Bundled instance by name (`"ft06"` / `"ft10"`), if any.
    pub fn builtin(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "ft06" => Some(Self::ft06()),
            "ft10" => Some(Self::ft10()),
            _ => None,
        }
    }

    /// Renders the instance in the same OR-library layout the parser reads.
    pub fn to_or_library_string(&self) -> String {
        let mut out = format!("{} {}\n", self.n_jobs, self.n_machines);
        for job in 0..self.n_jobs {
            let line: Vec<String> = (0..self.n_machines)
                .map(|pos| format!("{} {}", self.machine_of[job][pos], self.proc_time[job][pos]))
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Parses an OR-library instance file. `name` is left empty and
/// `known_optimum` unset; callers attach those separately.
pub fn parse_instance(text: &str) -> Result<JsspInstance, ParseError> {
    // Physical 1-based line numbers for error messages; blank lines skipped.
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());

    let (header_line, header) = lines.next().ok_or(ParseError::BadHeader { line: 1 })?;
    let header_ints = parse_ints(header_line, header)?;
    let (n_jobs, n_machines) = match header_ints.as_slice() {
        [n, m] if *n >= 1 && *m >= 1 => (*n as usize, *m as usize),
        _ => return Err(ParseError::BadHeader { line: header_line }),
    };

    let mut machine_of = Vec::with_capacity(n_jobs);
    let mut proc_time = Vec::with_capacity(n_jobs);
    let mut found_jobs = 0;

    for (line_no, line) in lines.by_ref() {
        if found_jobs == n_jobs {
            return Err(ParseError::TrailingContent { line: line_no });
        }
        let ints = parse_ints(line_no, line)?;
        if ints.len() != 2 * n_machines {
            return Err(ParseError::WrongPairCount {
                line: line_no,
                expected: n_machines,
                found: ints.len() / 2,
            });
        }
        let mut machines = Vec::with_capacity(n_machines);
        let mut durations = Vec::with_capacity(n_machines);
        let mut seen = vec![false; n_machines];
        for pair in ints.chunks(2) {
            let (machine, duration) = (pair[0], pair[1]);
            if machine < 0 || machine >= n_machines as i64 {
                return Err(ParseError::MachineOutOfRange {
                    line: line_no,
                    machine,
                    n_machines,
                });
            }
            if duration < 1 {
                return Err(ParseError::NonPositiveDuration {
                    line: line_no,
                    value: duration,
                });
            }
            let machine = machine as usize;
            if seen[machine] {
                return Err(ParseError::RepeatedMachine {
                    line: line_no,
                    machine,
                });
            }
            seen[machine] = true;
            machines.push(machine);
            durations.push(duration as u64);
        }
        machine_of.push(machines);
        proc_time.push(durations);
        found_jobs += 1;
    }

    if found_jobs < n_jobs {
        return Err(ParseError::MissingJobs {
            expected: n_jobs,
            found: found_jobs,
        });
    }

    Ok(JsspInstance {
        n_jobs,
        n_machines,
        machine_of,
        proc_time,
        name: String::new(),
        known_optimum: None,
    })
}

fn parse_ints(line_no: usize, line: &str) -> Result<Vec<i64>, ParseError> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<i64>().map_err(|_| ParseError::BadToken {
                line: line_no,
                token: tok.to_string(),
            })
        })
        .collect()
}

/// Generates a random instance: per job a uniformly random machine
/// permutation, durations uniform in `[p_min, p_max]`. Deterministic in
/// `seed`.
pub fn generate_random_instance(
    n_jobs: usize,
    n_machines: usize,
    p_min: u64,
    p_max: u64,
    seed: u64,
) -> Result<JsspInstance, GenerateError> {
    if n_jobs < 1 || n_machines < 1 {
        return Err(GenerateError::EmptyShape { n_jobs, n_machines });
    }
    if p_min < 1 || p_min > p_max {
        return Err(GenerateError::BadBounds { p_min, p_max });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut machine_of = Vec::with_capacity(n_jobs);
    let mut proc_time = Vec::with_capacity(n_jobs);
    for _ in 0..n_jobs {
        let mut machines: Vec<usize> = (0..n_machines).collect();
        machines.shuffle(&mut rng);
        let durations: Vec<u64> = (0..n_machines)
            .map(|_| rng.random_range(p_min..=p_max))
            .collect();
        machine_of.push(machines);
        proc_time.push(durations);
    }
    Ok(JsspInstance {
        n_jobs,
        n_machines,
        machine_of,
        proc_time,
        name: format!("rand{n_jobs}x{n_machines}s{seed}"),
        known_optimum: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_instance() {
        let inst = parse_instance("1 1\n0 5").unwrap();
        assert_eq!(inst.n_ops(), 1);
        assert_eq!(inst.proc_time[0][0], 5);
        assert_eq!(inst.max_processing_time(), 5);
    }

    #[test]
    fn ft06_shape_and_times() {
        let inst = JsspInstance::ft06();
        assert_eq!((inst.n_jobs, inst.n_machines), (6, 6));
        assert_eq!(inst.n_ops(), 36);
        let all: Vec<u64> = inst.proc_time.iter().flatten().copied().collect();
        assert!(all.iter().all(|&p| (1..=10).contains(&p)));
        assert_eq!(inst.max_processing_time(), 10);
        assert_eq!(inst.known_optimum, Some(55));
    }

    #[test]
    fn ft10_shape_and_times() {
        let inst = JsspInstance::ft10();
        assert_eq!(inst.n_ops(), 100);
        let all: Vec<u64> = inst.proc_time.iter().flatten().copied().collect();
        assert!(all.iter().all(|&p| (2..=99).contains(&p)));
        assert_eq!(*all.iter().min().unwrap(), 2);
        assert_eq!(inst.max_processing_time(), 99);
        assert_eq!(inst.known_optimum, Some(930));
    }

    #[test]
    fn parse_errors_name_the_line() {
        assert_eq!(
            parse_instance("x y\n"),
            Err(ParseError::BadToken {
                line: 1,
                token: "x".into()
            })
        );
        assert_eq!(
            parse_instance("2 2\n0 1 1 2\n0 1"),
            Err(ParseError::WrongPairCount {
                line: 3,
                expected: 2,
                found: 1
            })
        );
        assert_eq!(
            parse_instance("1 2\n0 1 1 0"),
            Err(ParseError::NonPositiveDuration { line: 2, value: 0 })
        );
        assert_eq!(
            parse_instance("1 2\n0 1 2 4"),
            Err(ParseError::MachineOutOfRange {
                line: 2,
                machine: 2,
                n_machines: 2
            })
        );
        assert_eq!(
            parse_instance("1 2\n0 1 0 4"),
            Err(ParseError::RepeatedMachine { line: 2, machine: 0 })
        );
        assert_eq!(
            parse_instance("2 1\n0 1"),
            Err(ParseError::MissingJobs {
                expected: 2,
                found: 1
            })
        );
        assert_eq!(
            parse_instance("1 1\n0 1\n0 2"),
            Err(ParseError::TrailingContent { line: 3 })
        );
    }

    #[test]
    fn generator_is_deterministic_and_valid() {
        let a = generate_random_instance(3, 3, 1, 9, 7).unwrap();
        let b = generate_random_instance(3, 3, 1, 9, 7).unwrap();
        assert_eq!(a, b);
        for row in &a.machine_of {
            let mut sorted = row.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, vec![0, 1, 2]);
        }
    }

    #[test]
    fn generator_degenerate_duration_range() {
        let inst = generate_random_instance(2, 2, 1, 1, 0).unwrap();
        assert!(inst.proc_time.iter().flatten().all(|&p| p == 1));
    }

    #[test]
    fn generator_rejects_bad_bounds() {
        assert_eq!(
            generate_random_instance(2, 2, 3, 2, 0),
            Err(GenerateError::BadBounds { p_min: 3, p_max: 2 })
        );
        assert_eq!(
            generate_random_instance(0, 2, 1, 2, 0),
            Err(GenerateError::EmptyShape {
                n_jobs: 0,
                n_machines: 2
            })
        );
    }

    proptest! {
        // Round-trip through the renderer; name/optimum are not part of the
        // file format, so they are copied over before comparing.
        #[test]
        fn parse_render_round_trip(n in 1usize..6, m in 1usize..6, seed in 0u64..500) {
            let inst = generate_random_instance(n, m, 1, 99, seed).unwrap();
            let mut back = parse_instance(&inst.to_or_library_string()).unwrap();
            back.name = inst.name.clone();
            back.known_optimum = inst.known_optimum;
            prop_assert_eq!(back, inst);
        }

        #[test]
        fn generated_instances_satisfy_invariants(n in 1usize..5, m in 1usize..5, seed in 0u64..200) {
            let inst = generate_random_instance(n, m, 2, 17, seed).unwrap();
            prop_assert_eq!(inst.n_ops(), n * m);
            for job in 0..n {
                let mut ms = inst.machine_of[job].clone();
                ms.sort_unstable();
                prop_assert_eq!(ms, (0..m).collect::<Vec<_>>());
                prop_assert!(inst.proc_time[job].iter().all(|&p| p >= 1));
            }
        }
    }
}
