//! Regenerates the bundled 50-user x 200-item rating fixture.
//!
//! Users have latent genre affinities; items have one to three genres and a
//! quality offset. Whether a user rated an item, and the rating, both follow
//! the user-item affinity.
//!
//! ```text
//! cargo run -p crir-core --example gen_fixture -- crates/core/fixtures/ml1m
//! ```

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const GENRES: [&str; 18] = [
    "Action",
    "Adventure",
    "Animation",
    "Children's",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Fantasy",
    "Film-Noir",
    "Horror",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
    "War",
    "Western",
];
const USERS: usize = 50;
const ITEMS: usize = 200;
const MIN_RATINGS: usize = 20;
const SEED: u64 = 20_240_601;

fn main() -> std::io::Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "crates/core/fixtures/ml1m".into()),
    );
    std::fs::create_dir_all(&out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let unit = Normal::new(0.0, 1.0).unwrap();

    let movie_ids: Vec<usize> = {
        let mut ids: Vec<usize> = sample(&mut rng, 3952, ITEMS)
            .into_iter()
            .map(|i| i + 1)
            .collect();
        ids.sort_unstable();
        ids
    };
    let mut movies = String::new();
    let mut item_genres = Vec::with_capacity(ITEMS);
    let mut quality = Vec::with_capacity(ITEMS);
    for (k, &id) in movie_ids.iter().enumerate() {
        let n = rng.gen_range(1..=3);
        let mut g: Vec<usize> = sample(&mut rng, GENRES.len(), n).into_vec();
        g.sort_unstable();
        let names: Vec<&str> = g.iter().map(|&i| GENRES[i]).collect();
        let year = 1930 + rng.gen_range(0..70);
        writeln!(
            movies,
            "{id}::Movie {} ({year})::{}",
            k + 1,
            names.join("|")
        )
        .unwrap();
        item_genres.push(g);
        quality.push(0.5 * unit.sample(&mut rng));
    }

    let mut ratings = String::new();
    let mut timestamp: u64 = 956_703_932;
    for user in 1..=USERS {
        let affinity: Vec<f64> = (0..GENRES.len()).map(|_| unit.sample(&mut rng)).collect();
        let score = |i: usize| {
            let g = &item_genres[i];
            g.iter().map(|&k| affinity[k]).sum::<f64>() / g.len() as f64 + quality[i]
        };
        let mut rated: Vec<(usize, u8)> = Vec::new();
        for i in 0..ITEMS {
            let s = score(i);
            let p_seen = 0.6 / (1.0 + (-1.5 * s).exp());
            if rng.gen::<f64>() < p_seen {
                rated.push((i, rating(s, &unit, &mut rng)));
            }
        }
        // Top up sparse users with their most affine unseen items.
        if rated.len() < MIN_RATINGS {
            let mut unseen: Vec<usize> = (0..ITEMS)
                .filter(|i| !rated.iter().any(|r| r.0 == *i))
                .collect();
            unseen.sort_by(|a, b| score(*b).partial_cmp(&score(*a)).unwrap());
            for &i in unseen.iter().take(MIN_RATINGS - rated.len()) {
                let r = rating(score(i), &unit, &mut rng);
                rated.push((i, r));
            }
            rated.sort_unstable();
        }
        for (i, r) in rated {
            timestamp += rng.gen_range(1..600);
            writeln!(ratings, "{user}::{}::{r}::{timestamp}", movie_ids[i]).unwrap();
        }
    }

    std::fs::write(out.join("movies.dat"), movies)?;
    std::fs::write(out.join("ratings.dat"), ratings)?;
    Ok(())
}

fn rating(score: f64, unit: &Normal<f64>, rng: &mut ChaCha8Rng) -> u8 {
    (3.0 + 1.2 * score + 0.6 * unit.sample(rng))
        .round()
        .clamp(1.0, 5.0) as u8
}
