//! User-partitioned data: per-round user sampling, virtual-client grouping,
//! example caps, a synthetic identity generator and the CSV dataset format.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::param::{RngStream, StreamPurpose};

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<f64>,
    pub label: usize,
}

/// All examples held by one user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserDataset {
    pub user_id: String,
    pub examples: Vec<Example>,
}

/// Number of classes spanned by the labels (max label + 1).
pub fn num_classes(users: &[UserDataset]) -> usize {
    users
        .iter()
        .flat_map(|u| u.examples.iter().map(|e| e.label + 1))
        .max()
        .unwrap_or(0)
}

pub fn input_dim(users: &[UserDataset]) -> Option<usize> {
    users
        .iter()
        .flat_map(|u| u.examples.first())
        .map(|e| e.input.len())
        .next()
}

/// A round-scoped group of users whose merged, shuffled data acts as a
/// single federated client.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualClient {
    /// Indices into the user list.
    pub members: Vec<usize>,
    pub examples: Vec<Example>,
}

impl VirtualClient {
    /// Sorted distinct labels present in the merged data.
    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.examples.iter().map(|e| e.label).collect();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// The users and virtual clients of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundSample {
    pub round: u64,
    pub sampled_users: Vec<usize>,
    pub virtual_clients: Vec<VirtualClient>,
}

/// Uniform sample of `users_per_round` distinct user indices out of
/// `num_users`, returned sorted.
pub fn sample_round_users(
    num_users: usize,
    users_per_round: usize,
    stream: &RngStream,
) -> Result<Vec<usize>> {
    if users_per_round > num_users {
        return Err(Error::invalid(format!(
            "cannot sample {users_per_round} users out of {num_users}"
        )));
    }
    let mut rng = stream.rng();
    let mut picked = index::sample(&mut rng, num_users, users_per_round).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Randomly partitions `sampled` into groups of `users_per_vc`; the last
/// group holds the remainder. Each group's data is concatenated and shuffled.
pub fn form_virtual_clients(
    users: &[UserDataset],
    sampled: &[usize],
    users_per_vc: usize,
    stream: &RngStream,
) -> Result<Vec<VirtualClient>> {
    if users_per_vc == 0 {
        return Err(Error::invalid("users_per_vc must be >= 1"));
    }
    if let Some(&bad) = sampled.iter().find(|&&u| u >= users.len()) {
        return Err(Error::invalid(format!("user index {bad} out of range")));
    }
    let mut rng = stream.rng();
    let mut order = sampled.to_vec();
    order.shuffle(&mut rng);
    Ok(order
        .chunks(users_per_vc)
        .map(|members| {
            let mut examples: Vec<Example> = members
                .iter()
                .flat_map(|&u| users[u].examples.iter().cloned())
                .collect();
            examples.shuffle(&mut rng);
            VirtualClient {
                members: members.to_vec(),
                examples,
            }
        })
        .collect())
}

/// Keeps a uniform subset of `cap` examples when the client holds more.
pub fn cap_examples(vc: VirtualClient, cap: usize, stream: &RngStream) -> Result<VirtualClient> {
    if cap == 0 {
        return Err(Error::invalid("examples cap must be >= 1"));
    }
    if vc.examples.len() <= cap {
        return Ok(vc);
    }
    let mut rng = stream.rng();
    let keep = index::sample(&mut rng, vc.examples.len(), cap);
    let examples = keep.iter().map(|i| vc.examples[i].clone()).collect();
    Ok(VirtualClient {
        members: vc.members,
        examples,
    })
}

/// Samples, groups and caps the users of round `round`.
pub fn sample_round(
    users: &[UserDataset],
    users_per_round: usize,
    users_per_vc: usize,
    examples_cap: usize,
    seed: u64,
    round: u64,
) -> Result<RoundSample> {
    let sampled = sample_round_users(
        users.len(),
        users_per_round,
        &RngStream::derive(seed, StreamPurpose::UserSampling, round, 0),
    )?;
    let vcs = form_virtual_clients(
        users,
        &sampled,
        users_per_vc,
        &RngStream::derive(seed, StreamPurpose::Grouping, round, 0),
    )?;
    let virtual_clients = vcs
        .into_iter()
        .enumerate()
        .map(|(i, vc)| {
            cap_examples(
                vc,
                examples_cap,
                &RngStream::derive(seed, StreamPurpose::ExampleCap, round, i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RoundSample {
        round,
        sampled_users: sampled,
        virtual_clients,
    })
}

/// Stacks examples into a batch, relabeling through `label_map` when given.
pub fn to_batch(examples: &[Example], label_map: Option<&HashMap<usize, usize>>) -> Result<Batch> {
    let dim = examples.first().map_or(0, |e| e.input.len());
    let mut flat = Vec::with_capacity(examples.len() * dim);
    let mut labels = Vec::with_capacity(examples.len());
    for e in examples {
        if e.input.len() != dim {
            return Err(Error::invalid("examples with mixed input dimensions"));
        }
        flat.extend_from_slice(&e.input);
        labels.push(match label_map {
            Some(m) => *m
                .get(&e.label)
                .ok_or_else(|| Error::invalid(format!("label {} not in local class map", e.label)))?,
            None => e.label,
        });
    }
    let inputs = Array2::from_shape_vec((examples.len(), dim), flat)
        .map_err(|e| Error::invalid(e.to_string()))?;
    Batch::new(inputs, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticParams {
    pub num_users: usize,
    #[serde(default = "one")]
    pub classes_per_user: usize,
    pub examples_per_class: usize,
    pub input_dim: usize,
    pub noise_std: f64,
}

fn one() -> usize {
    1
}

/// Users holding Gaussian perturbations of random unit-norm class
/// prototypes. User `u` owns classes `u * classes_per_user ..`, so with one
/// class per user every user is a distinct identity.
pub fn generate_synthetic_identities(
    params: &SyntheticParams,
    stream: &RngStream,
) -> Result<Vec<UserDataset>> {
    let p = params;
    if p.num_users == 0 || p.classes_per_user == 0 || p.examples_per_class == 0 || p.input_dim == 0
    {
        return Err(Error::invalid("synthetic data counts must all be >= 1"));
    }
    if !(p.noise_std >= 0.0) || !p.noise_std.is_finite() {
        return Err(Error::invalid(format!("noise_std must be >= 0, got {}", p.noise_std)));
    }
    let mut rng = stream.rng();
    let mut users = Vec::with_capacity(p.num_users);
    for u in 0..p.num_users {
        let mut examples = Vec::with_capacity(p.classes_per_user * p.examples_per_class);
        for c in 0..p.classes_per_user {
            let label = u * p.classes_per_user + c;
            let proto = loop {
                let v: Vec<f64> = (0..p.input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = crate::param::l2_norm(&v);
                if n > 0.0 {
                    break v.into_iter().map(|x| x / n).collect::<Vec<f64>>();
                }
            };
            for _ in 0..p.examples_per_class {
                let input = proto
                    .iter()
                    .map(|&x| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        x + p.noise_std * z
                    })
                    .collect();
                examples.push(Example { input, label });
            }
        }
        users.push(UserDataset {
            user_id: format!("u{u:06}"),
            examples,
        });
    }
    Ok(users)
}

/// Reads `user_id,label,x0,..,x{d-1}` rows (header required). Rows are
/// grouped by user in order of first appearance; labels are remapped to a
/// dense `0..C` space in ascending order of their original values.
pub fn load_dataset_csv(path: &Path) -> Result<Vec<UserDataset>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Ok(Vec::new());
    }
    if headers.len() < 3 || &headers[0] != "user_id" || &headers[1] != "label" {
        return Err(parse_err(
            1,
            "header must be user_id,label,x0,...".to_string(),
        ));
    }
    let dim = headers.len() - 2;

    let mut order: Vec<String> = Vec::new();
    let mut by_user: HashMap<String, Vec<(i64, Vec<f64>)>> = HashMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 2 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", dim + 2, record.len()),
            ));
        }
        let user = record[0].to_string();
        if user.is_empty() {
            return Err(parse_err(line, "empty user_id".into()));
        }
        let label: i64 = record[1]
            .trim()
            .parse()
            .map_err(|e| parse_err(line, format!("label {:?}: {e}", &record[1])))?;
        let input = record
            .iter()
            .skip(2)
            .map(|f| {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|e| parse_err(line, format!("value {f:?}: {e}")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(parse_err(line, format!("non-finite value {f:?}")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        by_user
            .entry(user.clone())
            .or_insert_with(|| {
                order.push(user);
                Vec::new()
            })
            .push((label, input));
    }

    let dense: BTreeMap<i64, usize> = by_user
        .values()
        .flatten()
        .map(|(l, _)| *l)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l, i))
        .collect();
    Ok(order
        .into_iter()
        .map(|user_id| {
            let rows = by_user.remove(&user_id).expect("user recorded");
            UserDataset {
                user_id,
                examples: rows
                    .into_iter()
                    .map(|(l, input)| Example {
                        input,
                        label: dense[&l],
                    })
                    .collect(),
            }
        })
        .collect())
}

pub fn write_dataset_csv(path: &Path, users: &[UserDataset]) -> Result<()> {
    let dim = input_dim(users).unwrap_or(0);
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write!(w, "user_id,label")?;
    for i in 0..dim {
        write!(w, ",x{i}")?;
    }
    writeln!(w)?;
    for u in users {
        if u.user_id.contains([',', '"', '\n', '\r']) {
            return Err(Error::invalid(format!("user id {:?} is not CSV-safe", u.user_id)));
        }
        for e in &u.examples {
            if e.input.len() != dim {
                return Err(Error::invalid("examples with mixed input dimensions"));
            }
            write!(w, "{},{}", u.user_id, e.label)?;
            for v in &e.input {
                // shortest representation that parses back to the same bits
                write!(w, ",{v:?}")?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}
