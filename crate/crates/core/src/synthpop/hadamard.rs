//! Hadamard matrices with an all-ones first row.
//!
//! Built from Paley's first construction (order `q + 1` for a prime
//! `q ≡ 3 mod 4`) and Sylvester doubling. Orders 36, 52, 76, 92 and 100 are
//! among those not reachable this way.

use super::SynthError;

fn is_prime(q: usize) -> bool {
    q >= 2 && (2..).take_while(|d| d * d <= q).all(|d| q % d != 0)
}

fn paley(q: usize) -> Vec<Vec<i8>> {
    let mut residue = vec![false; q];
    for x in 1..q {
        residue[x * x % q] = true;
    }
    let chi = |a: usize| -> i8 {
        if a == 0 {
            0
        } else if residue[a] {
            1
        } else {
            -1
        }
    };
    let n = q + 1;
    let mut h = vec![vec![0i8; n]; n];
    for (i, row) in h.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let s = match (i, j) {
                (0, 0) => 0,
                (0, _) => 1,
                (_, 0) => -1,
                _ => chi((j + q - i) % q),
            };
            *v = s + i8::from(i == j);
        }
    }
    h
}

fn double(h: &[Vec<i8>]) -> Vec<Vec<i8>> {
    let n = h.len();
    let mut out = vec![vec![0i8; 2 * n]; 2 * n];
    for i in 0..n {
        for j in 0..n {
            let v = h[i][j];
            out[i][j] = v;
            out[i][j + n] = v;
            out[i + n][j] = v;
            out[i + n][j + n] = -v;
        }
    }
    out
}

/// A Hadamard matrix of order `n`.
pub fn hadamard(n: usize) -> Result<Vec<Vec<i8>>, SynthError> {
    match n {
        1 => return Ok(vec![vec![1]]),
        2 => return Ok(double(&[vec![1]])),
        _ => {}
    }
    if n % 4 != 0 {
        return Err(SynthError::Input(format!(
            "Hadamard order must be 1, 2 or a multiple of 4, got {n}"
        )));
    }
    if is_prime(n - 1) && (n - 1) % 4 == 3 {
        return Ok(paley(n - 1));
    }
    hadamard(n / 2)
        .map(|h| double(&h))
        .map_err(|_| SynthError::Input(format!("no Hadamard construction available for order {n}")))
}
