use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use wali_autograd::{Float, Tensor, Var, PAD};

use super::ParamStore;

/// Spatial layout of an activation stored as `[n·h·w, channels]` (NHWC rows).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub(crate) struct Geom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl Geom {
    pub fn rows(&self) -> usize {
        self.n * self.h * self.w
    }
}

fn normal_tensor<T: Float>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.sample::<f64, _>(StandardNormal) * std))
        .collect();
    Tensor::new(shape, data)
}

/// Fully connected layer `x·W + b`.
#[derive(Clone, Debug)]
pub(crate) struct Dense {
    w: usize,
    b: usize,
}

impl Dense {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        let w = store.push(format!("{name}.w"), normal_tensor(rng, &[fan_in, fan_out], std));
        let b = store.push(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub fn forward<T: Float>(&self, p: &[Var<T>], x: &Var<T>) -> Var<T> {
        x.matmul(&p[self.w]).add_row(&p[self.b])
    }
}

/// 3×3 convolution with zero padding 1 and stride 1 or 2, via im2col + matmul.
#[derive(Clone, Debug)]
pub(crate) struct Conv3 {
    w: usize,
    b: usize,
    cin: usize,
    stride: usize,
}

thread_local! {
    static IM2COL: RefCell<HashMap<(Geom, usize, usize), Arc<Vec<u32>>>> = RefCell::new(HashMap::new());
    static UPSAMPLE: RefCell<HashMap<(Geom, usize), Arc<Vec<u32>>>> = RefCell::new(HashMap::new());
}

fn im2col_index(g: Geom, c: usize, stride: usize) -> Arc<Vec<u32>> {
    IM2COL.with(|cache| {
        if let Some(idx) = cache.borrow().get(&(g, c, stride)) {
            return Arc::clone(idx);
        }
        let (ho, wo) = (g.h.div_ceil(stride), g.w.div_ceil(stride));
        let mut idx = Vec::with_capacity(g.n * ho * wo * 9 * c);
        for n in 0..g.n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * stride + ky) as isize - 1;
                            let ix = (ox * stride + kx) as isize - 1;
                            let inside =
                                iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w;
                            for ch in 0..c {
                                idx.push(if inside {
                                    (((n * g.h + iy as usize) * g.w + ix as usize) * c + ch) as u32
                                } else {
                                    PAD
                                });
                            }
                        }
                    }
                }
            }
        }
        let idx = Arc::new(idx);
        cache.borrow_mut().insert((g, c, stride), Arc::clone(&idx));
        idx
    })
}

impl Conv3 {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let std = gain / ((9 * cin) as f64).sqrt();
        let w = store.push(format!("{name}.w"), normal_tensor(rng, &[9 * cin, cout], std));
        let b = store.push(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, cin, stride }
    }

    pub fn forward<T: Float>(&self, p: &[Var<T>], x: &Var<T>, g: Geom) -> (Var<T>, Geom) {
        debug_assert_eq!(x.shape(), &[g.rows(), self.cin]);
        let out = Geom {
            n: g.n,
            h: g.h.div_ceil(self.stride),
            w: g.w.div_ceil(self.stride),
        };
        let cols = x.gather(im2col_index(g, self.cin, self.stride), &[out.rows(), 9 * self.cin]);
        (cols.matmul(&p[self.w]).add_row(&p[self.b]), out)
    }
}

/// Nearest-neighbour ×2 upsampling of an NHWC activation.
pub(crate) fn upsample2<T: Float>(x: &Var<T>, g: Geom) -> (Var<T>, Geom) {
    let c = x.shape()[1];
    let out = Geom {
        n: g.n,
        h: g.h * 2,
        w: g.w * 2,
    };
    let idx = UPSAMPLE.with(|cache| {
        if let Some(idx) = cache.borrow().get(&(g, c)) {
            return Arc::clone(idx);
        }
        let mut idx = Vec::with_capacity(out.rows() * c);
        for n in 0..g.n {
            for y in 0..out.h {
                for xx in 0..out.w {
                    let src = (n * g.h + y / 2) * g.w + xx / 2;
                    idx.extend((0..c).map(|ch| (src * c + ch) as u32));
                }
            }
        }
        let idx = Arc::new(idx);
        cache.borrow_mut().insert((g, c), Arc::clone(&idx));
        idx
    });
    (x.gather(idx, &[out.rows(), c]), out)
}
