//! Training tuples `(s, o, a, R, s', o')` and their columnar text format.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::kernel::Point;

/// Shape of a state or observation space.
#[derive(Debug, Clone, PartialEq)]
pub enum Space {
    /// Finite set of named symbols; points are `Point::Symbol(index)`.
    Discrete { names: Vec<String> },
    /// Real vectors of fixed dimension.
    Continuous { dim: usize },
}

impl Space {
    pub fn discrete<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Self {
        Space::Discrete {
            names: names.into_iter().map(Into::into).collect(),
        }
    }

    pub fn size(&self) -> Option<usize> {
        match self {
            Space::Discrete { names } => Some(names.len()),
            Space::Continuous { .. } => None,
        }
    }

    fn columns(&self, prefix: &str) -> Vec<String> {
        match self {
            Space::Discrete { .. } => vec![prefix.to_string()],
            Space::Continuous { dim } => (0..*dim).map(|d| format!("{prefix}.{d}")).collect(),
        }
    }

    fn width(&self) -> usize {
        match self {
            Space::Discrete { .. } => 1,
            Space::Continuous { dim } => *dim,
        }
    }

    fn format(&self, p: &Point, out: &mut Vec<String>) -> Result<()> {
        match (self, p) {
            (Space::Discrete { names }, Point::Symbol(s)) => {
                let name = names
                    .get(*s)
                    .ok_or_else(|| Error::Format(format!("symbol {s} out of range")))?;
                out.push(name.clone());
            }
            (Space::Continuous { dim }, Point::Vector(v)) if v.len() == *dim => {
                out.extend(v.iter().map(|x| format_f64(*x)));
            }
            _ => return Err(Error::DomainMismatch),
        }
        Ok(())
    }

    fn parse(&self, fields: &[&str]) -> Result<Point> {
        match self {
            Space::Discrete { names } => {
                let f = fields[0];
                names
                    .iter()
                    .position(|n| n == f)
                    .map(Point::Symbol)
                    .ok_or_else(|| Error::Format(format!("unknown symbol {f:?}")))
            }
            Space::Continuous { .. } => fields
                .iter()
                .map(|f| parse_f64(f))
                .collect::<Result<Vec<_>>>()
                .map(Point::Vector),
        }
    }
}

/// Spaces needed to serialize a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Spaces {
    pub state: Space,
    pub observation: Space,
    pub actions: Vec<String>,
}

/// One training tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Point,
    pub observation: Point,
    pub action: usize,
    pub reward: f64,
    pub next_state: Point,
    pub next_observation: Point,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub records: Vec<Transition>,
}

impl Dataset {
    pub fn new(records: Vec<Transition>) -> Self {
        Dataset { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn states(&self) -> Vec<Point> {
        self.records.iter().map(|r| r.state.clone()).collect()
    }

    pub fn observations(&self) -> Vec<Point> {
        self.records.iter().map(|r| r.observation.clone()).collect()
    }

    pub fn next_states(&self) -> Vec<Point> {
        self.records.iter().map(|r| r.next_state.clone()).collect()
    }

    pub fn actions(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.action).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W, spaces: &Spaces) -> Result<()> {
        let io = |e: std::io::Error| Error::Format(e.to_string());
        let mut header = spaces.state.columns("s");
        header.extend(spaces.observation.columns("o"));
        header.push("a".into());
        header.push("r".into());
        header.extend(spaces.state.columns("s_next"));
        header.extend(spaces.observation.columns("o_next"));
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        let mut fields = Vec::with_capacity(header.len());
        for r in &self.records {
            fields.clear();
            spaces.state.format(&r.state, &mut fields)?;
            spaces.observation.format(&r.observation, &mut fields)?;
            let action = spaces
                .actions
                .get(r.action)
                .ok_or(Error::UnknownAction(r.action))?;
            fields.push(action.clone());
            fields.push(format_f64(r.reward));
            spaces.state.format(&r.next_state, &mut fields)?;
            spaces.observation.format(&r.next_observation, &mut fields)?;
            writeln!(w, "{}", fields.join(",")).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, spaces: &Spaces) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("missing header".into()))?
            .map_err(|e| Error::Format(e.to_string()))?;
        let ws = spaces.state.width();
        let wo = spaces.observation.width();
        let width = 2 * ws + 2 * wo + 2;
        if header.split(',').count() != width {
            return Err(Error::Format(format!(
                "header has {} columns, expected {width}",
                header.split(',').count()
            )));
        }
        let mut records = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::Format(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != width {
                return Err(Error::Format(format!(
                    "line {}: {} fields, expected {width}",
                    lineno + 2,
                    f.len()
                )));
            }
            let mut at = 0;
            let mut take = |k: usize| {
                let s = &f[at..at + k];
                at += k;
                s
            };
            let state = spaces.state.parse(take(ws))?;
            let observation = spaces.observation.parse(take(wo))?;
            let a = take(1)[0];
            let action = spaces
                .actions
                .iter()
                .position(|n| n == a)
                .ok_or_else(|| Error::Format(format!("line {}: unknown action {a:?}", lineno + 2)))?;
            let reward = parse_f64(take(1)[0])?;
            let next_state = spaces.state.parse(take(ws))?;
            let next_observation = spaces.observation.parse(take(wo))?;
            records.push(Transition {
                state,
                observation,
                action,
                reward,
                next_state,
                next_observation,
            });
        }
        Ok(Dataset { records })
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::Format(format!("not a number: {s:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spaces() -> Spaces {
        Spaces {
            state: Space::Continuous { dim: 2 },
            observation: Space::Continuous { dim: 1 },
            actions: vec!["left".into(), "right".into()],
        }
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let ds = Dataset::new(vec![Transition {
            state: Point::Vector(vec![0.1, -1.0 / 3.0]),
            observation: Point::scalar(std::f64::consts::PI),
            action: 1,
            reward: 1e-300,
            next_state: Point::Vector(vec![f64::MIN_POSITIVE, 2.5]),
            next_observation: Point::scalar(-0.0),
        }]);
        let mut buf = Vec::new();
        ds.write_csv(&mut buf, &spaces()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("s.0,s.1,o.0,a,r,s_next.0,s_next.1,o_next.0\n"));
        let back = Dataset::read_csv(&buf[..], &spaces()).unwrap();
        assert_eq!(back, ds);
        let mut again = Vec::new();
        back.write_csv(&mut again, &spaces()).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn rejects_bad_rows() {
        let text = "s.0,s.1,o.0,a,r,s_next.0,s_next.1,o_next.0\n1,2,3,up,0,1,2,3\n";
        assert!(Dataset::read_csv(text.as_bytes(), &spaces()).is_err());
        let text = "s.0,s.1,o.0,a,r,s_next.0,s_next.1,o_next.0\n1,2,3,left,0,1,2\n";
        assert!(Dataset::read_csv(text.as_bytes(), &spaces()).is_err());
    }

    #[test]
    fn discrete_symbols_by_name() {
        let sp = Spaces {
            state: Space::discrete(["x", "y"]),
            observation: Space::discrete(["o1", "o2"]),
            actions: vec!["a1".into()],
        };
        let ds = Dataset::new(vec![Transition {
            state: Point::Symbol(1),
            observation: Point::Symbol(0),
            action: 0,
            reward: 0.5,
            next_state: Point::Symbol(0),
            next_observation: Point::Symbol(1),
        }]);
        let mut buf = Vec::new();
        ds.write_csv(&mut buf, &sp).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "s,o,a,r,s_next,o_next\ny,o1,a1,5.0000000000000000e-1,x,o2\n"
        );
        assert_eq!(Dataset::read_csv(&buf[..], &sp).unwrap(), ds);
    }
}
