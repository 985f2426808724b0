//! MovieLens-1M adapter (`ratings.dat`, optional `users.dat` and `movies.dat`).
//!
//! Ratings above 3 are positives, below 3 negatives; neutral ratings are
//! dropped.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

use super::preprocess::RawTable;
use super::schema::FieldKind;

/// Label for a 1–5 star rating, `None` for the neutral 3.
pub fn rating_label(rating: u8) -> Option<u8> {
    match rating {
        r if r > 3 => Some(1),
        3 => None,
        _ => Some(0),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    // movies.dat is Latin-1; titles are not used, so lossy decoding is fine.
    Ok(String::from_utf8_lossy(&bytes)
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

pub fn load_movielens(dir: &Path) -> Result<RawTable> {
    let users: HashMap<String, Vec<String>> = match dir.join("users.dat") {
        p if p.exists() => read_lines(&p)?
            .into_iter()
            .map(|l| {
                let parts: Vec<String> = l.split("::").map(str::to_string).collect();
                (parts[0].clone(), parts[1..].to_vec())
            })
            .collect(),
        _ => HashMap::new(),
    };
    let genres: HashMap<String, String> = match dir.join("movies.dat") {
        p if p.exists() => read_lines(&p)?
            .into_iter()
            .filter_map(|l| {
                let parts: Vec<&str> = l.split("::").collect();
                let first = parts.get(2)?.split('|').next()?.to_string();
                Some((parts[0].to_string(), first))
            })
            .collect(),
        _ => HashMap::new(),
    };

    let mut names = vec!["user_id".to_string(), "movie_id".to_string()];
    if !users.is_empty() {
        names.extend(["gender", "age", "occupation", "zip"].map(String::from));
    }
    if !genres.is_empty() {
        names.push("genre".into());
    }
    let mut columns: Vec<Vec<Option<String>>> = vec![Vec::new(); names.len()];
    let mut labels = Vec::new();
    for (n, line) in read_lines(&dir.join("ratings.dat"))?.iter().enumerate() {
        let parts: Vec<&str> = line.split("::").collect();
        if parts.len() < 3 {
            return Err(Error::Data(format!("ratings.dat line {}: malformed", n + 1)));
        }
        let rating: u8 = parts[2]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("ratings.dat line {}: bad rating", n + 1)))?;
        let Some(label) = rating_label(rating) else { continue };
        labels.push(label);
        let mut row = vec![Some(parts[0].to_string()), Some(parts[1].to_string())];
        if !users.is_empty() {
            let u = users.get(parts[0]);
            for k in 0..4 {
                row.push(u.and_then(|u| u.get(k).cloned()));
            }
        }
        if !genres.is_empty() {
            row.push(genres.get(parts[1]).cloned());
        }
        for (c, v) in columns.iter_mut().zip(row) {
            c.push(v);
        }
    }
    let kinds = vec![FieldKind::Categorical; names.len()];
    Ok(RawTable {
        names,
        kinds,
        columns,
        labels,
    })
}
