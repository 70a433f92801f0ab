use crate::error::{Error, Result};
use crate::layers::KernelField;
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

use super::network::Model;

/// Output channels shown per selected window.
pub const KERNELS_PER_ROW: usize = 16;

/// One row of the kernel dump.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelRow {
    /// Window `(i, j)` in the first level's output grid.
    pub window: (usize, usize),
    /// Fraction of valid input pixels under the window.
    pub valid_fraction: f64,
    /// Squared L2 norm of the full window kernel.
    pub energy: f64,
}

/// Generated first-level kernels of two windows: the most valid and the
/// most damaged under the given mask.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelDump {
    pub rows: Vec<KernelRow>,
    /// Grayscale grid `(1, 1, h, w)` in `[0, 1]`, 0.5 is zero. One row of
    /// `k`x`k` tiles per selected window, one tile per output channel, taps
    /// averaged over input channels.
    pub grid: Tensor4<f64>,
}

fn valid_fraction(mask: &Tensor4<f64>, i: usize, j: usize, k: usize, s: usize, pad: usize) -> f64 {
    let ms = mask.shape();
    let (mut valid, mut total) = (0.0, 0.0);
    for dy in 0..k {
        for dx in 0..k {
            let (y, x) = ((i * s + dy) as isize - pad as isize, (j * s + dx) as isize - pad as isize);
            if y >= 0 && x >= 0 && (y as usize) < ms.h && (x as usize) < ms.w {
                total += 1.0;
                valid += mask.at(0, 0, y as usize, x as usize);
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        valid / total
    }
}

/// Dumps the first-level kernels generated for a single `(1, 1, H, W)` mask.
pub fn dump_first_layer_kernels<T: Scalar>(model: &Model<T>, mask: &Tensor4<T>) -> Result<KernelDump> {
    if mask.shape().n != 1 {
        return Err(Error::config("kernel dump takes a single mask"));
    }
    let fields = model.kernel_fields(mask)?;
    let field: KernelField<f64> = {
        let f = &fields[0];
        KernelField::new(f.tensor().cast(), *f.spec())?
    };
    let spec = *field.spec();
    let (nh, nw, _) = field.dims();
    let mask64 = mask.cast::<f64>();
    let energy = field.window_energy();

    let mut best = ((0, 0), f64::NEG_INFINITY);
    let mut worst = ((0, 0), f64::INFINITY);
    for i in 0..nh {
        for j in 0..nw {
            let v = valid_fraction(&mask64, i, j, spec.k, spec.s, spec.pad);
            if v > best.1 {
                best = ((i, j), v);
            }
            if v < worst.1 {
                worst = ((i, j), v);
            }
        }
    }
    let rows: Vec<KernelRow> = [best, worst]
        .iter()
        .map(|&((i, j), v)| KernelRow {
            window: (i, j),
            valid_fraction: v,
            energy: energy[i * nw + j],
        })
        .collect();

    let k = spec.k;
    let shown = spec.c_out.min(KERNELS_PER_ROW);
    let tiles: Vec<Vec<f64>> = rows
        .iter()
        .flat_map(|r| {
            let field = &field;
            (0..shown).map(move |co| {
                let mut tile = vec![0.0; k * k];
                for ci in 0..spec.c_in {
                    for kh in 0..k {
                        for kw in 0..k {
                            tile[kh * k + kw] +=
                                field.tap(0, r.window.0, r.window.1, co, ci, kh, kw) / spec.c_in as f64;
                        }
                    }
                }
                tile
            })
        })
        .collect();
    let peak = tiles
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);

    let (gh, gw) = (rows.len() * (k + 1) + 1, shown * (k + 1) + 1);
    let mut grid = Tensor4::full(Shape4::new(1, 1, gh, gw), 1.0);
    for (t, tile) in tiles.iter().enumerate() {
        let (row, col) = (t / shown, t % shown);
        for kh in 0..k {
            for kw in 0..k {
                let v = 0.5 + 0.5 * tile[kh * k + kw] / peak;
                grid.set(0, 0, 1 + row * (k + 1) + kh, 1 + col * (k + 1) + kw, v);
            }
        }
    }
    Ok(KernelDump { rows, grid })
}
