//! Shared helpers for the integration suites.

use fpt::tasks::{TOK_CLOSE, TOK_OPEN_MAX, TOK_OPEN_MED, TOK_OPEN_MIN, TOK_OPEN_SM};
use fpt::tensor::Tensor;

/// Recursive-descent evaluator for one-hot list-operation token streams,
/// written independently of the generator's own evaluation path.
pub fn interpret_listops(ids: &[usize]) -> u8 {
    fn parse(ids: &[usize], pos: &mut usize) -> u8 {
        let t = ids[*pos];
        *pos += 1;
        if t < 10 {
            return t as u8;
        }
        let mut args = Vec::new();
        while ids[*pos] != TOK_CLOSE {
            args.push(parse(ids, pos));
        }
        *pos += 1; // consume the close token
        match t {
            TOK_OPEN_MAX => *args.iter().max().unwrap(),
            TOK_OPEN_MIN => *args.iter().min().unwrap(),
            TOK_OPEN_MED => {
                args.sort_unstable();
                args[(args.len() - 1) / 2]
            }
            TOK_OPEN_SM => (args.iter().map(|&d| d as u32).sum::<u32>() % 10) as u8,
            other => panic!("unexpected token {other}"),
        }
    }
    let mut pos = 0;
    let v = parse(ids, &mut pos);
    assert_eq!(pos, ids.len(), "trailing tokens");
    v
}

/// Argmax token ids of a one-hot [l, vocab] tensor.
pub fn token_ids(t: &Tensor) -> Vec<usize> {
    let dim = t.shape()[1];
    t.data()
        .chunks(dim)
        .map(|row| row.iter().position(|&v| v == 1.0).unwrap())
        .collect()
}
