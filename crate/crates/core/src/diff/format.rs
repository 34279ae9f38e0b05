//! Plain-text parameter files.
//!
//! ```text
//! patient0-net 1
//! widths 9 6 5
//! activations tanh
//! head softmax 0.5
//! critic-layout 12 5 5 5      (critics only: state width, then action widths)
//! params 89
//! 0.25
//! ...
//! ```
//!
//! Reals use Rust's shortest round-trip decimal rendering.

use std::fmt::Write as _;
use std::path::Path;

use super::models::{CriticNet, PolicyNet};
use super::net::{Activation, Mlp, NetSpec, OutputHead, ParamVector};
use crate::error::{Error, Result};

const MAGIC: &str = "patient0-net 1";

/// Contents of a parameter file.
#[derive(Clone, Debug, PartialEq)]
pub enum NetFile {
    Policy(PolicyNet),
    Critic(CriticNet),
}

impl NetFile {
    pub fn render(&self) -> String {
        let (net, layout) = match self {
            NetFile::Policy(p) => (p.net(), None),
            NetFile::Critic(c) => (c.net(), Some((c.state_dim(), c.action_dims()))),
        };
        let spec = net.spec();
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC}");
        let widths: Vec<String> = spec.layer_widths.iter().map(|w| w.to_string()).collect();
        let _ = writeln!(out, "widths {}", widths.join(" "));
        let acts: Vec<&str> = spec.activations.iter().map(|a| a.name()).collect();
        let _ = writeln!(out, "activations {}", acts.join(" ").trim_end());
        match spec.head {
            OutputHead::Softmax { temperature } => {
                let _ = writeln!(out, "head softmax {temperature}");
            }
            OutputHead::Linear => {
                let _ = writeln!(out, "head linear");
            }
        }
        if let Some((state, dims)) = layout {
            let dims: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "critic-layout {state} {}", dims.join(" "));
        }
        let values = net.params().values();
        let _ = writeln!(out, "params {}", values.len());
        for v in values {
            let _ = writeln!(out, "{v}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| -> Result<(usize, &str)> {
            lines.next().ok_or(Error::Parse {
                line: 0,
                reason: format!("unexpected end of file, expected {what}"),
            })
        };
        let (line, magic) = next("header")?;
        if magic != MAGIC {
            return Err(Error::Parse {
                line,
                reason: format!("expected `{MAGIC}`"),
            });
        }
        let (line, widths) = next("widths")?;
        let layer_widths = fields(line, widths, "widths")?
            .iter()
            .map(|w| parse_num::<usize>(line, w))
            .collect::<Result<Vec<_>>>()?;
        let (line, acts) = next("activations")?;
        let activations = fields(line, acts, "activations")?
            .iter()
            .map(|a| {
                Activation::parse(a).ok_or(Error::Parse {
                    line,
                    reason: format!("unknown activation `{a}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (line, head) = next("head")?;
        let head_fields = fields(line, head, "head")?;
        let head = match head_fields.as_slice() {
            ["softmax", t] => OutputHead::Softmax {
                temperature: parse_num(line, t)?,
            },
            ["linear"] => OutputHead::Linear,
            _ => {
                return Err(Error::Parse {
                    line,
                    reason: "head must be `softmax <T>` or `linear`".into(),
                })
            }
        };
        let (mut line, mut text) = next("params")?;
        let mut layout = None;
        if text.starts_with("critic-layout") {
            let nums = fields(line, text, "critic-layout")?
                .iter()
                .map(|w| parse_num::<usize>(line, w))
                .collect::<Result<Vec<_>>>()?;
            if nums.is_empty() {
                return Err(Error::Parse {
                    line,
                    reason: "critic-layout needs a state width".into(),
                });
            }
            layout = Some((nums[0], nums[1..].to_vec()));
            (line, text) = next("params")?;
        }
        let count: usize = match fields(line, text, "params")?.as_slice() {
            [c] => parse_num(line, c)?,
            _ => {
                return Err(Error::Parse {
                    line,
                    reason: "expected `params <count>`".into(),
                })
            }
        };
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            let (line, v) = next("parameter value")?;
            values.push(parse_num::<f64>(line, v)?);
        }
        let spec = NetSpec::new(layer_widths, activations, head)?;
        let params = ParamVector::from_values(&spec, values)?;
        let net = Mlp::new(spec, params)?;
        match layout {
            Some((state, dims)) => Ok(NetFile::Critic(CriticNet::new(net, state, &dims)?)),
            None => Ok(NetFile::Policy(PolicyNet::new(net)?)),
        }
    }
}

fn fields<'a>(line: usize, text: &'a str, key: &str) -> Result<Vec<&'a str>> {
    let mut it = text.split_whitespace();
    if it.next() != Some(key) {
        return Err(Error::Parse {
            line,
            reason: format!("expected `{key}`"),
        });
    }
    Ok(it.collect())
}

fn parse_num<T: std::str::FromStr>(line: usize, s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        line,
        reason: format!("bad number `{s}`"),
    })
}

pub fn write_net_file(path: &Path, file: &NetFile) -> Result<()> {
    std::fs::write(path, file.render()).map_err(|e| Error::io(path, e))
}

pub fn read_net_file(path: &Path) -> Result<NetFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    NetFile::parse(&text)
}
