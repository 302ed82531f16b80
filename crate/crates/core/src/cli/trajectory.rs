//! Per-slot trajectory table and its CSV form.

use std::fmt::Write as _;

use crate::price;
use crate::scenario::ReducedScenario;

/// `%.12g`-style formatting: 12 significant digits, trailing zeros dropped.
pub fn format_number(x: f64) -> String {
    const DIGITS: i32 = 12;
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= DIGITS {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (DIGITS - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    /// One-based slot.
    pub t: usize,
    pub price: f64,
    pub supply: f64,
    pub total_demand: f64,
    pub demands: Vec<f64>,
    pub imbalance: f64,
    pub leader_stage_cost: f64,
    pub user_costs: Vec<f64>,
}

/// Rows for slots `1..=T` plus the terminal price.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
    pub terminal_price: f64,
}

impl Trajectory {
    pub fn new(reduced: &ReducedScenario, supply: &[f64], demands: &[Vec<f64>], prices: &[f64]) -> Self {
        let n = reduced.num_users();
        let rows = (0..reduced.slots())
            .map(|t| {
                let total = price::total_demand(demands, t);
                TrajectoryRow {
                    t: t + 1,
                    price: prices[t],
                    supply: supply[t],
                    total_demand: total,
                    demands: (0..n).map(|i| demands[i][t]).collect(),
                    imbalance: supply[t] - total,
                    leader_stage_cost: reduced.leader_stage_cost(t, supply[t], total, prices[t]),
                    user_costs: (0..n)
                        .map(|i| reduced.user_stage_cost(i, t, demands[i][t], prices[t]))
                        .collect(),
                }
            })
            .collect();
        Trajectory {
            rows,
            terminal_price: prices[reduced.slots()],
        }
    }

    pub fn num_users(&self) -> usize {
        self.rows.first().map_or(0, |r| r.demands.len())
    }

    /// Price path including the terminal entry.
    pub fn prices(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.rows.iter().map(|r| r.price).collect();
        p.push(self.terminal_price);
        p
    }

    pub fn header(num_users: usize) -> String {
        let mut h = String::from("t,price,supply,total_demand");
        for i in 1..=num_users {
            write!(h, ",d_{i}").unwrap();
        }
        h.push_str(",imbalance,leader_stage_cost");
        for i in 1..=num_users {
            write!(h, ",user_cost_{i}").unwrap();
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let n = self.num_users();
        let mut out = Self::header(n);
        out.push('\n');
        for r in &self.rows {
            let mut cells = vec![r.t.to_string(), format_number(r.price), format_number(r.supply), format_number(r.total_demand)];
            cells.extend(r.demands.iter().map(|&d| format_number(d)));
            cells.push(format_number(r.imbalance));
            cells.push(format_number(r.leader_stage_cost));
            cells.extend(r.user_costs.iter().map(|&c| format_number(c)));
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        // terminal price row: only t and price are defined
        let mut last = vec![(self.rows.len() + 1).to_string(), format_number(self.terminal_price)];
        last.extend(std::iter::repeat_n(String::new(), 2 * n + 4));
        out.push_str(&last.join(","));
        out.push('\n');
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty trajectory file")?;
        let cols: Vec<&str> = header.split(',').collect();
        let n = cols.iter().filter(|c| c.starts_with("d_")).count();
        if header != Self::header(n) {
            return Err(format!("unexpected trajectory header: {header}"));
        }
        let body: Vec<&str> = lines.filter(|l| !l.is_empty()).collect();
        let (terminal, rows) = body.split_last().ok_or("trajectory has no rows")?;
        let parse = |s: &str, line: usize| s.parse::<f64>().map_err(|e| format!("line {line}: {s:?}: {e}"));
        let mut out = Vec::with_capacity(rows.len());
        for (k, line) in rows.iter().enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != cols.len() {
                return Err(format!("line {}: expected {} cells, found {}", k + 2, cols.len(), cells.len()));
            }
            let f = |j: usize| parse(cells[j], k + 2);
            out.push(TrajectoryRow {
                t: cells[0].parse().map_err(|e| format!("line {}: {e}", k + 2))?,
                price: f(1)?,
                supply: f(2)?,
                total_demand: f(3)?,
                demands: (0..n).map(|i| f(4 + i)).collect::<Result<_, _>>()?,
                imbalance: f(4 + n)?,
                leader_stage_cost: f(5 + n)?,
                user_costs: (0..n).map(|i| f(6 + n + i)).collect::<Result<_, _>>()?,
            });
        }
        let cells: Vec<&str> = terminal.split(',').collect();
        let terminal_price = parse(cells.get(1).copied().unwrap_or(""), body.len() + 1)?;
        Ok(Trajectory { rows: out, terminal_price })
    }
}
