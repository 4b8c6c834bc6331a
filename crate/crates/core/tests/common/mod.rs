//! Helpers shared by the integration tests.

#![allow(dead_code)]

use subflow::config::Config;
use subflow::diff::{Activation, Approximator};
use subflow::env::Environment;
use subflow::oracle::StateSpace;

/// A small config on a hypergrid; `extra` is spliced into the top-level
/// object, e.g. `"objective": {"kind": "subtb"}`.
pub fn grid_config(height: usize, dims: usize, extra: &str) -> Config {
    let sep = if extra.is_empty() { "" } else { "," };
    let text = format!(
        r#"{{"env": {{"kind": "hypergrid", "height": {height}, "dims": {dims}}},
            "policy": {{"hidden": 16, "depth": 2}}{sep} {extra}}}"#
    );
    Config::from_json_str(&text).unwrap()
}

/// A network that outputs `rows[i]` on the encoding of `space.states[i]`.
///
/// One rectified hidden unit per state fires with value 1 on its own binary
/// encoding and 0 on every other; the output layer stores the rows.
/// Non-finite targets (masked actions) become 0.
pub fn table_net(env: &dyn Environment, space: &StateSpace, rows: &[Vec<f64>]) -> Approximator {
    let width = env.encoding_width();
    let n = space.len();
    let out = rows[0].len();
    let mut params = vec![0.0; (width + 1) * n + (n + 1) * out];
    for (u, s) in space.states.iter().enumerate() {
        let e = env.encode(s).unwrap();
        assert!(e.iter().all(|&v| v == 0.0 || v == 1.0), "encoding of {s} is not binary");
        for (j, &v) in e.iter().enumerate() {
            params[j * n + u] = 2.0 * v - 1.0;
        }
        params[width * n + u] = 1.0 - e.iter().sum::<f64>();
    }
    let base = (width + 1) * n;
    for (u, row) in rows.iter().enumerate() {
        for (o, &v) in row.iter().enumerate() {
            params[base + u * out + o] = if v.is_finite() { v } else { 0.0 };
        }
    }
    Approximator::from_params(vec![width, n, out], Activation::LeakyRelu(0.0), params).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
