use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Output width of each transformer encoder; the encoder count is `channels.len()`.
    pub channels: Vec<usize>,
    pub head_channels: usize,
    /// Neighbours per point for positional fusion (self included).
    pub k: usize,
    /// Reduction ratio: split width is `C′ / psi`.
    pub psi: usize,
    /// Upsampling ratio.
    pub ratio: usize,
    /// Divide attention logits by `sqrt(w)`. Off by default.
    pub attn_scale: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: vec![32, 64, 128, 256, 256],
            head_channels: 16,
            k: 20,
            psi: 4,
            ratio: 4,
            attn_scale: false,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
            ln_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// Default widths for `layers` encoders: doubling from 32, capped at 256.
    pub fn channels_for_layers(layers: usize) -> Vec<usize> {
        (0..layers).map(|i| (32usize << i.min(3)).min(256)).collect()
    }

    pub fn with_layers(layers: usize) -> Self {
        ModelConfig {
            channels: Self::channels_for_layers(layers),
            ..Self::default()
        }
    }

    pub fn layers(&self) -> usize {
        self.channels.len()
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&self.head_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels.is_empty() {
            return bad("at least one encoder is required".into());
        }
        if self.head_channels == 0 || self.k == 0 || self.ratio == 0 {
            return bad("head_channels, k and ratio must be positive".into());
        }
        if self.psi < 2 {
            return bad(format!("psi = {} must be at least 2", self.psi));
        }
        if self.channels.windows(2).any(|w| w[1] < w[0]) {
            return bad(format!("channels {:?} must be non-decreasing", self.channels));
        }
        for &c in &self.channels {
            ScMsaConfig::from_psi(c, self.psi)?;
        }
        if !self.out_channels().is_multiple_of(self.ratio) {
            return bad(format!(
                "last width {} is not divisible by ratio {}",
                self.out_channels(),
                self.ratio
            ));
        }
        if !(self.bn_eps > 0.0 && self.ln_eps > 0.0) {
            return bad("normalization eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return bad(format!("bn momentum {} must be in [0, 1)", self.bn_momentum));
        }
        Ok(())
    }

    /// `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        let ch: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        format!(
            "channels={}\nhead_channels={}\nk={}\npsi={}\nratio={}\nattn_scale={}\nbn_eps={:e}\nbn_momentum={}\nln_eps={:e}\n",
            ch.join(","),
            self.head_channels,
            self.k,
            self.psi,
            self.ratio,
            self.attn_scale,
            self.bn_eps,
            self.bn_momentum,
            self.ln_eps
        )
    }

    /// Parses the output of [`ModelConfig::to_kv`]. Every key is required.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            map.insert(k.trim().to_string(), (n + 1, v.trim().to_string()));
        }
        fn get<'a>(map: &'a BTreeMap<String, (usize, String)>, key: &str) -> Result<(usize, &'a str)> {
            map.get(key)
                .map(|(l, v)| (*l, v.as_str()))
                .ok_or_else(|| Error::Config(format!("missing key {key}")))
        }
        fn num<T: std::str::FromStr>(map: &BTreeMap<String, (usize, String)>, key: &str) -> Result<T> {
            let (line, v) = get(map, key)?;
            v.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad value for {key}: {v:?}"),
            })
        }
        let (line, ch) = get(&map, "channels")?;
        let channels = ch
            .split(',')
            .map(|c| {
                c.trim().parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("bad channel width {c:?}"),
                })
            })
            .collect::<Result<Vec<usize>>>()?;
        let cfg = ModelConfig {
            channels,
            head_channels: num(&map, "head_channels")?,
            k: num(&map, "k")?,
            psi: num(&map, "psi")?,
            ratio: num(&map, "ratio")?,
            attn_scale: num(&map, "attn_scale")?,
            bn_eps: num(&map, "bn_eps")?,
            bn_momentum: num(&map, "bn_momentum")?,
            ln_eps: num(&map, "ln_eps")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Channel windows of one shifted-channel attention block.
///
/// Head `m` (0-based) reads channels `[m·d, m·d + w)`; the windows tile
/// `[0, C′)` exactly and consecutive windows share `w − d` channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScMsaConfig {
    pub c_prime: usize,
    pub w: usize,
    pub d: usize,
    pub heads: usize,
}

impl ScMsaConfig {
    /// `w = C′/ψ`, `d = w/2`, `M = 2ψ − 1`.
    pub fn from_psi(c_prime: usize, psi: usize) -> Result<Self> {
        if psi < 2 || !c_prime.is_multiple_of(psi) {
            return Err(Error::Config(format!(
                "width {c_prime} is not divisible by psi = {psi}"
            )));
        }
        let w = c_prime / psi;
        if !w.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "split width {w} = {c_prime}/{psi} must be even to halve the shift"
            )));
        }
        Self::new(c_prime, w, w / 2, 2 * psi - 1)
    }

    /// Arbitrary windows, including `d == w` (plain multi-head attention).
    pub fn new(c_prime: usize, w: usize, d: usize, heads: usize) -> Result<Self> {
        if w == 0 || d == 0 || heads == 0 {
            return Err(Error::Config("split width, shift and heads must be positive".into()));
        }
        if d > w {
            return Err(Error::Config(format!("shift {d} exceeds split width {w}")));
        }
        if (heads - 1) * d + w != c_prime {
            return Err(Error::Config(format!(
                "{heads} windows of width {w} with shift {d} do not tile {c_prime} channels"
            )));
        }
        Ok(ScMsaConfig {
            c_prime,
            w,
            d,
            heads,
        })
    }

    pub fn window(&self, m: usize) -> std::ops::Range<usize> {
        m * self.d..m * self.d + self.w
    }

    /// Width of the concatenated head outputs.
    pub fn concat_width(&self) -> usize {
        self.heads * self.w
    }
}

impl fmt::Display for ScMsaConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C'={} w={} d={} M={}", self.c_prime, self.w, self.d, self.heads)
    }
}
