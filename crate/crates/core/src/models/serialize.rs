//! Model files: a text header of `key=value` lines closed by `END`, then a
//! little-endian binary payload.
//!
//! Logistic payload: `k·(d+1)` f64 weights.
//! GBDT payload: best_round u32, k base scores f64, round count u32, then per
//! round and class a tree (node count u32, nodes), then the validation-loss
//! history (count u32, f64 values). A node is tag u8 (0 leaf, 1 split),
//! feature u32, bin u16, threshold f64, left u32, right u32, value f64.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use super::{GbdtModel, GbdtParams, LogisticModel, Model, Node, Tree};
use crate::error::{Error, Result};

const MAGIC: &str = "LOBMODEL 1";

pub fn save_model<W: Write>(model: &Model, mut out: W) -> Result<()> {
    let mut header = vec![
        MAGIC.to_string(),
        format!("kind={}", model.kind()),
        format!("k={}", model.n_classes()),
        format!("d={}", model.n_features()),
    ];
    let mut payload = Vec::new();
    match model {
        Model::Logistic(m) => {
            for w in &m.weights {
                payload.extend(w.to_le_bytes());
            }
        }
        Model::Gbdt(m) => {
            let p = &m.params;
            header.extend([
                format!("learning_rate={:?}", p.learning_rate),
                format!("rounds={}", p.rounds),
                format!("max_depth={}", p.max_depth),
                format!("min_samples_leaf={}", p.min_samples_leaf),
                format!("bins={}", p.bins),
                format!("lambda={:?}", p.lambda),
                format!("early_stopping_rounds={}", p.early_stopping_rounds),
            ]);
            put_u32(&mut payload, m.best_round);
            for b in &m.base_score {
                payload.extend(b.to_le_bytes());
            }
            put_u32(&mut payload, m.rounds.len());
            for tree in m.rounds.iter().flatten() {
                put_u32(&mut payload, tree.nodes.len());
                for node in &tree.nodes {
                    let (tag, feature, bin, threshold, left, right, value) = match *node {
                        Node::Leaf { value } => (0u8, 0, 0, 0.0, 0, 0, value),
                        Node::Split {
                            feature,
                            bin,
                            threshold,
                            left,
                            right,
                        } => (1u8, feature, bin, threshold, left, right, 0.0),
                    };
                    payload.push(tag);
                    payload.extend(feature.to_le_bytes());
                    payload.extend(bin.to_le_bytes());
                    payload.extend(threshold.to_le_bytes());
                    payload.extend(left.to_le_bytes());
                    payload.extend(right.to_le_bytes());
                    payload.extend(value.to_le_bytes());
                }
            }
            put_u32(&mut payload, m.val_loss.len());
            for l in &m.val_loss {
                payload.extend(l.to_le_bytes());
            }
        }
    }
    header.push("END".into());
    out.write_all(header.join("\n").as_bytes())?;
    out.write_all(b"\n")?;
    out.write_all(&payload)?;
    Ok(())
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend((v as u32).to_le_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::format("model payload truncated"))?;
        self.pos = end;
        Ok(bytes.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

fn field<T: std::str::FromStr>(h: &BTreeMap<String, String>, key: &str) -> Result<T> {
    h.get(key)
        .ok_or_else(|| Error::format(format!("model header lacks `{key}`")))?
        .parse()
        .map_err(|_| Error::format(format!("bad model header value for `{key}`")))
}

pub fn load_model<R: BufRead>(mut source: R) -> Result<Model> {
    let mut header = BTreeMap::new();
    let mut line = String::new();
    source.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::format("not a model file (bad magic line)"));
    }
    loop {
        line.clear();
        if source.read_line(&mut line)? == 0 {
            return Err(Error::format("model header not terminated"));
        }
        let l = line.trim_end();
        if l == "END" {
            break;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| Error::format(format!("bad model header line `{l}`")))?;
        header.insert(k.to_string(), v.to_string());
    }
    let mut payload = Vec::new();
    source.read_to_end(&mut payload)?;
    let mut cur = Cursor {
        buf: &payload,
        pos: 0,
    };
    let k: usize = field(&header, "k")?;
    let d: usize = field(&header, "d")?;
    let kind: String = field(&header, "kind")?;
    let model = match kind.as_str() {
        "logistic" => {
            let weights = (0..k * (d + 1))
                .map(|_| cur.f64())
                .collect::<Result<Vec<_>>>()?;
            Model::Logistic(LogisticModel { k, d, weights })
        }
        "gbdt" => {
            let params = GbdtParams {
                learning_rate: field(&header, "learning_rate")?,
                rounds: field(&header, "rounds")?,
                max_depth: field(&header, "max_depth")?,
                min_samples_leaf: field(&header, "min_samples_leaf")?,
                bins: field(&header, "bins")?,
                lambda: field(&header, "lambda")?,
                early_stopping_rounds: field(&header, "early_stopping_rounds")?,
            };
            let best_round = cur.u32()? as usize;
            let base_score = (0..k).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            let n_rounds = cur.u32()? as usize;
            let mut rounds = Vec::with_capacity(n_rounds);
            for _ in 0..n_rounds {
                let mut trees = Vec::with_capacity(k);
                for _ in 0..k {
                    let n_nodes = cur.u32()? as usize;
                    let mut nodes = Vec::with_capacity(n_nodes);
                    for _ in 0..n_nodes {
                        let tag = cur.u8()?;
                        let feature = cur.u32()?;
                        let bin = cur.u16()?;
                        let threshold = cur.f64()?;
                        let left = cur.u32()?;
                        let right = cur.u32()?;
                        let value = cur.f64()?;
                        nodes.push(match tag {
                            0 => Node::Leaf { value },
                            1 => {
                                if feature as usize >= d
                                    || left as usize >= n_nodes
                                    || right as usize >= n_nodes
                                {
                                    return Err(Error::format("tree node index out of range"));
                                }
                                Node::Split {
                                    feature,
                                    bin,
                                    threshold,
                                    left,
                                    right,
                                }
                            }
                            t => return Err(Error::format(format!("bad tree node tag {t}"))),
                        });
                    }
                    if nodes.is_empty() {
                        return Err(Error::format("empty tree"));
                    }
                    trees.push(Tree { nodes });
                }
                rounds.push(trees);
            }
            let n_loss = cur.u32()? as usize;
            let val_loss = (0..n_loss).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            if best_round > rounds.len() {
                return Err(Error::format("best_round exceeds rounds built"));
            }
            Model::Gbdt(GbdtModel {
                k,
                d,
                params,
                base_score,
                rounds,
                best_round,
                val_loss,
            })
        }
        other => return Err(Error::format(format!("unknown model kind `{other}`"))),
    };
    if cur.pos != payload.len() {
        return Err(Error::format("trailing bytes after model payload"));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::ClassWeights;
    use crate::models::{train_gbdt, Matrix, TrainConfig};

    #[test]
    fn logistic_round_trip() {
        let m = Model::Logistic(LogisticModel {
            k: 2,
            d: 1,
            weights: vec![0.5, -1.25, 1e-300, f64::MIN_POSITIVE],
        });
        let mut buf = Vec::new();
        save_model(&m, &mut buf).unwrap();
        assert_eq!(load_model(&buf[..]).unwrap(), m);
    }

    #[test]
    fn gbdt_round_trip() {
        let rows: Vec<Vec<f64>> = (0..120).map(|i| vec![i as f64, (i % 7) as f64]).collect();
        let y: Vec<u8> = (0..120).map(|i| (i % 3) as u8).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let cfg = TrainConfig {
            rounds: 5,
            min_samples_leaf: 5,
            ..Default::default()
        };
        let g = train_gbdt(&x, &y, &ClassWeights::uniform(3), &cfg, (&x, &y)).unwrap();
        let m = Model::Gbdt(g);
        let mut buf = Vec::new();
        save_model(&m, &mut buf).unwrap();
        let back = load_model(&buf[..]).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.predict_proba(&x).unwrap(), m.predict_proba(&x).unwrap());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let m = Model::Logistic(LogisticModel::zeros(3, 4));
        let mut buf = Vec::new();
        save_model(&m, &mut buf).unwrap();
        buf.pop();
        assert!(load_model(&buf[..]).is_err());
        assert!(load_model(&b"garbage\n"[..]).is_err());
    }
}
