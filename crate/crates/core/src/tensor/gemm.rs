//! Packed matrix multiply with a fixed accumulation order.
//!
//! Every output element is produced as `c0 + a[i,0]*b[0,j] + a[i,1]*b[1,j] + ...`
//! evaluated strictly left to right with a separate multiply and add (never
//! fused). That is the same arithmetic a naive triple loop performs, so the
//! result is bit-identical to it regardless of which SIMD width the kernel is
//! compiled for. Vectorization happens across output columns only.

use super::element::Float;

const KC: usize = 256;
const MC: usize = 96;
const NC: usize = 2048;

/// Strided read-only matrix view: element `(i, j)` lives at `i * rs + j * cs`.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T: Copy> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        MatRef { data, rs: cols, cs: 1 }
    }

    /// The transpose of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        MatRef { data, rs: 1, cs: cols }
    }

    #[inline(always)]
    fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.rs + j * self.cs]
    }
}

/// Right-hand operand of a product.
#[derive(Clone, Copy)]
#[doc(hidden)]
pub enum BSource<'a, T> {
    Strided(MatRef<'a, T>),
    /// Pre-packed `k x n`: columns in panels of [`panel_width`], panel `q`
    /// holding row `r` at `(q * k + r) * width`, padded with zeros.
    Packed(&'a [T]),
}

pub trait GemmScalar: Sized {
    #[doc(hidden)]
    fn gemm_dispatch(
        m: usize,
        n: usize,
        k: usize,
        a: MatRef<'_, Self>,
        b: BSource<'_, Self>,
        c: &mut [Self],
        accumulate: bool,
    );

    #[doc(hidden)]
    fn panel_width() -> usize;
}

/// Column-panel width that [`gemm_packed`] expects on this CPU.
pub(crate) fn panel_width<T: Float>() -> usize {
    T::panel_width()
}

/// `c (m x n, row-major) = [c +] a (m x k) * b (k x n)`.
pub(crate) fn gemm<T: Float>(
    m: usize,
    n: usize,
    k: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(T::zero());
        }
        return;
    }
    if m > 0 && k > 0 {
        assert!((m - 1) * a.rs + (k - 1) * a.cs < a.data.len(), "gemm lhs out of range");
        assert!((k - 1) * b.rs + (n - 1) * b.cs < b.data.len(), "gemm rhs out of range");
    }
    T::gemm_dispatch(m, n, k, a, BSource::Strided(b), c, accumulate);
}

/// [`gemm`] with a right-hand side already in panel layout.
pub(crate) fn gemm_packed<T: Float>(
    m: usize,
    n: usize,
    k: usize,
    a: MatRef<'_, T>,
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    assert!(c.len() >= m * n, "gemm output too small");
    let nr = T::panel_width();
    assert!(b.len() >= n.div_ceil(nr) * nr * k, "packed rhs too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(T::zero());
        }
        return;
    }
    assert!((m - 1) * a.rs + (k - 1) * a.cs < a.data.len(), "gemm lhs out of range");
    T::gemm_dispatch(m, n, k, a, BSource::Packed(b), c, accumulate);
}

/// Straightforward triple loop with the same accumulation order. Test oracle.
#[cfg(test)]
pub(crate) fn gemm_reference<T: Float>(
    m: usize,
    n: usize,
    k: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: &mut [T],
    accumulate: bool,
) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = if accumulate { c[i * n + j] } else { T::zero() };
            for p in 0..k {
                acc += a.at(i, p) * b.at(p, j);
            }
            c[i * n + j] = acc;
        }
    }
}

#[inline(always)]
fn pack_b<T: Float, const NR: usize>(b: &MatRef<'_, T>, pc: usize, kc: usize, jc: usize, nc: usize, out: &mut Vec<T>) {
    out.clear();
    let panels = nc.div_ceil(NR);
    if b.rs == 1 && b.cs != 1 {
        // Columns of B are contiguous: copy each one down its panel slot.
        out.resize(panels * NR * kc, T::zero());
        for jp in 0..panels {
            let j0 = jc + jp * NR;
            let width = NR.min(jc + nc - j0);
            let panel = &mut out[jp * NR * kc..(jp + 1) * NR * kc];
            for j in 0..width {
                let col = &b.data[(j0 + j) * b.cs + pc..(j0 + j) * b.cs + pc + kc];
                for (p, &v) in col.iter().enumerate() {
                    panel[p * NR + j] = v;
                }
            }
        }
        return;
    }
    for jp in 0..panels {
        let j0 = jc + jp * NR;
        let width = NR.min(jc + nc - j0);
        for p in 0..kc {
            let row = pc + p;
            if b.cs == 1 && width == NR {
                let start = row * b.rs + j0;
                out.extend_from_slice(&b.data[start..start + NR]);
            } else {
                for j in 0..NR {
                    out.push(if j < width { b.at(row, j0 + j) } else { T::zero() });
                }
            }
        }
    }
}

#[inline(always)]
fn pack_a<T: Float, const MR: usize>(a: &MatRef<'_, T>, ic: usize, mc: usize, pc: usize, kc: usize, out: &mut Vec<T>) {
    out.clear();
    let panels = mc.div_ceil(MR);
    if a.cs == 1 && a.rs != 1 {
        // Rows of A are contiguous: copy each one across its panel slot.
        out.resize(panels * MR * kc, T::zero());
        for ip in 0..panels {
            let i0 = ic + ip * MR;
            let height = MR.min(ic + mc - i0);
            let panel = &mut out[ip * MR * kc..(ip + 1) * MR * kc];
            for i in 0..height {
                let row = &a.data[(i0 + i) * a.rs + pc..(i0 + i) * a.rs + pc + kc];
                for (p, &v) in row.iter().enumerate() {
                    panel[p * MR + i] = v;
                }
            }
        }
        return;
    }
    for ip in 0..panels {
        let i0 = ic + ip * MR;
        let height = MR.min(ic + mc - i0);
        for p in 0..kc {
            let col = pc + p;
            for i in 0..MR {
                out.push(if i < height { a.at(i0 + i, col) } else { T::zero() });
            }
        }
    }
}

/// Portable micro-kernel; the SIMD variants below compute the same sums.
#[inline(always)]
fn micro_kernel_scalar<T: Float, const MR: usize, const NR: usize>(
    kc: usize,
    a: &[T],
    b: &[T],
    ldb: usize,
    acc: &mut [[T; NR]; MR],
) {
    let a = &a[..kc * MR];
    for (p, ar) in a.chunks_exact(MR).enumerate() {
        let br = &b[p * ldb..p * ldb + NR];
        for i in 0..MR {
            let av = ar[i];
            for j in 0..NR {
                acc[i][j] += av * br[j];
            }
        }
    }
}

/// A register-tiled kernel for one element type and instruction set.
trait MicroKernel<T: Float, const MR: usize, const NR: usize> {
    /// # Safety
    /// The CPU must support the kernel's instruction set. `a` holds `kc * MR`
    /// packed values; row `p` of the B panel starts at `b[p * ldb]`.
    unsafe fn run(kc: usize, a: &[T], b: &[T], ldb: usize, acc: &mut [[T; NR]; MR]);
}

struct Portable;

impl<T: Float, const MR: usize, const NR: usize> MicroKernel<T, MR, NR> for Portable {
    #[inline(always)]
    unsafe fn run(kc: usize, a: &[T], b: &[T], ldb: usize, acc: &mut [[T; NR]; MR]) {
        micro_kernel_scalar::<T, MR, NR>(kc, a, b, ldb, acc)
    }
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use super::MicroKernel;
    use std::arch::x86_64::*;

    pub struct Avx512;
    pub struct Avx2;

    // Two vector registers per row of the tile, MR rows.
    macro_rules! simd_kernel {
        ($isa:ty, $t:ty, $feat:literal, $lanes:expr, $vec:ty,
         $zero:ident, $load:ident, $store:ident, $set1:ident, $mul:ident, $add:ident) => {
            impl<const MR: usize> MicroKernel<$t, MR, { 2 * $lanes }> for $isa {
                #[inline(always)]
                unsafe fn run(kc: usize, a: &[$t], b: &[$t], ldb: usize, acc: &mut [[$t; 2 * $lanes]; MR]) {
                    #[target_feature(enable = $feat)]
                    unsafe fn inner<const MR: usize>(
                        kc: usize,
                        a: *const $t,
                        b: *const $t,
                        ldb: usize,
                        acc: &mut [[$t; 2 * $lanes]; MR],
                    ) {
                        let mut lo: [$vec; MR] = [$zero(); MR];
                        let mut hi: [$vec; MR] = [$zero(); MR];
                        for i in 0..MR {
                            lo[i] = $load(acc[i].as_ptr());
                            hi[i] = $load(acc[i].as_ptr().add($lanes));
                        }
                        for p in 0..kc {
                            let b0 = $load(b.add(p * ldb));
                            let b1 = $load(b.add(p * ldb + $lanes));
                            let ap = a.add(p * MR);
                            for i in 0..MR {
                                let av = $set1(*ap.add(i));
                                lo[i] = $add(lo[i], $mul(av, b0));
                                hi[i] = $add(hi[i], $mul(av, b1));
                            }
                        }
                        for i in 0..MR {
                            $store(acc[i].as_mut_ptr(), lo[i]);
                            $store(acc[i].as_mut_ptr().add($lanes), hi[i]);
                        }
                    }
                    assert!(a.len() >= kc * MR && kc > 0 && b.len() >= (kc - 1) * ldb + 2 * $lanes);
                    inner::<MR>(kc, a.as_ptr(), b.as_ptr(), ldb, acc)
                }
            }
        };
    }

    simd_kernel!(
        Avx512,
        f32,
        "avx512f",
        16,
        __m512,
        _mm512_setzero_ps,
        _mm512_loadu_ps,
        _mm512_storeu_ps,
        _mm512_set1_ps,
        _mm512_mul_ps,
        _mm512_add_ps
    );
    simd_kernel!(
        Avx512,
        f64,
        "avx512f",
        8,
        __m512d,
        _mm512_setzero_pd,
        _mm512_loadu_pd,
        _mm512_storeu_pd,
        _mm512_set1_pd,
        _mm512_mul_pd,
        _mm512_add_pd
    );
    simd_kernel!(
        Avx2,
        f32,
        "avx2",
        8,
        __m256,
        _mm256_setzero_ps,
        _mm256_loadu_ps,
        _mm256_storeu_ps,
        _mm256_set1_ps,
        _mm256_mul_ps,
        _mm256_add_ps
    );
    simd_kernel!(
        Avx2,
        f64,
        "avx2",
        4,
        __m256d,
        _mm256_setzero_pd,
        _mm256_loadu_pd,
        _mm256_storeu_pd,
        _mm256_set1_pd,
        _mm256_mul_pd,
        _mm256_add_pd
    );
}

#[inline(always)]
fn gemm_blocked<T: Float, K: MicroKernel<T, MR, NR>, const MR: usize, const NR: usize>(
    m: usize,
    n: usize,
    k: usize,
    a: MatRef<'_, T>,
    b: BSource<'_, T>,
    c: &mut [T],
    accumulate: bool,
) {
    let mut bpack: Vec<T> = Vec::new();
    let mut apack: Vec<T> = Vec::with_capacity(KC * MC.min(m.next_multiple_of(MR)));
    let ldc = n;
    for jc in (0..n).step_by(NC) {
        let nc = NC.min(n - jc);
        for pc in (0..k).step_by(KC) {
            let kc = KC.min(k - pc);
            let fresh = pc == 0 && !accumulate;
            let (bbuf, bbase) = match &b {
                BSource::Strided(b) => {
                    pack_b::<T, NR>(b, pc, kc, jc, nc, &mut bpack);
                    (&bpack[..], 0)
                }
                BSource::Packed(p) => (*p, (jc / NR * k + pc) * NR),
            };
            let panel_stride = match b {
                BSource::Strided(_) => NR * kc,
                BSource::Packed(_) => NR * k,
            };
            for ic in (0..m).step_by(MC) {
                let mc = MC.min(m - ic);
                pack_a::<T, MR>(&a, ic, mc, pc, kc, &mut apack);
                for jp in 0..nc.div_ceil(NR) {
                    let j0 = jc + jp * NR;
                    let width = NR.min(n - j0);
                    let start = bbase + jp * panel_stride;
                    let bpanel = &bbuf[start..start + NR * kc];
                    for ip in 0..mc.div_ceil(MR) {
                        let i0 = ic + ip * MR;
                        let height = MR.min(m - i0);
                        let apanel = &apack[ip * MR * kc..(ip + 1) * MR * kc];
                        let mut acc = [[T::zero(); NR]; MR];
                        if !fresh {
                            for i in 0..height {
                                let row = &c[(i0 + i) * ldc + j0..(i0 + i) * ldc + j0 + width];
                                acc[i][..width].copy_from_slice(row);
                            }
                        }
                        // SAFETY: callers only select `K` after checking CPU support.
                        unsafe { K::run(kc, apanel, bpanel, NR, &mut acc) };
                        for i in 0..height {
                            let row = &mut c[(i0 + i) * ldc + j0..(i0 + i) * ldc + j0 + width];
                            row.copy_from_slice(&acc[i][..width]);
                        }
                    }
                }
            }
        }
    }
}

macro_rules! gemm_dispatch {
    ($t:ty, ($mr512:expr, $nr512:expr), ($mr2:expr, $nr2:expr), ($mrg:expr, $nrg:expr)) => {
        impl GemmScalar for $t {
            fn gemm_dispatch(
                m: usize,
                n: usize,
                k: usize,
                a: MatRef<'_, $t>,
                b: BSource<'_, $t>,
                c: &mut [$t],
                accumulate: bool,
            ) {
                #[cfg(target_arch = "x86_64")]
                {
                    if std::is_x86_feature_detected!("avx512f") {
                        return gemm_blocked::<$t, simd::Avx512, $mr512, $nr512>(m, n, k, a, b, c, accumulate);
                    }
                    if std::is_x86_feature_detected!("avx2") {
                        return gemm_blocked::<$t, simd::Avx2, $mr2, $nr2>(m, n, k, a, b, c, accumulate);
                    }
                }
                gemm_blocked::<$t, Portable, $mrg, $nrg>(m, n, k, a, b, c, accumulate)
            }

            fn panel_width() -> usize {
                #[cfg(target_arch = "x86_64")]
                {
                    if std::is_x86_feature_detected!("avx512f") {
                        return $nr512;
                    }
                    if std::is_x86_feature_detected!("avx2") {
                        return $nr2;
                    }
                }
                $nrg
            }
        }
    };
}

gemm_dispatch!(f32, (8, 32), (6, 16), (4, 8));
gemm_dispatch!(f64, (8, 16), (6, 8), (4, 4));

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matches_reference_bitwise_for_awkward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(m, n, k) in &[(1, 1, 1), (7, 13, 5), (17, 33, 300), (100, 3, 520), (9, 2100, 3)] {
            let a = random(m * k, &mut rng);
            let b = random(k * n, &mut rng);
            let init = random(m * n, &mut rng);
            for accumulate in [false, true] {
                let mut fast = init.clone();
                let mut slow = init.clone();
                gemm(m, n, k, MatRef::row_major(&a, k), MatRef::row_major(&b, n), &mut fast, accumulate);
                gemm_reference(m, n, k, MatRef::row_major(&a, k), MatRef::row_major(&b, n), &mut slow, accumulate);
                assert!(fast.iter().zip(&slow).all(|(x, y)| x.to_bits() == y.to_bits()), "{m}x{n}x{k}");
            }
        }
    }

    #[test]
    fn packed_rhs_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let nr = panel_width::<f64>();
        for &(m, n, k) in &[(3, 5, 4), (16, 70, 300), (9, 2100, 3)] {
            let a = random(m * k, &mut rng);
            let b = random(k * n, &mut rng);
            let mut packed = vec![0.0; n.div_ceil(nr) * nr * k];
            for r in 0..k {
                for j in 0..n {
                    packed[(j / nr * k + r) * nr + j % nr] = b[r * n + j];
                }
            }
            let mut fast = vec![0.0; m * n];
            let mut slow = vec![0.0; m * n];
            gemm_packed(m, n, k, MatRef::row_major(&a, k), &packed, &mut fast, false);
            gemm_reference(m, n, k, MatRef::row_major(&a, k), MatRef::row_major(&b, n), &mut slow, false);
            assert!(fast.iter().zip(&slow).all(|(x, y)| x.to_bits() == y.to_bits()), "{m}x{n}x{k}");
        }
    }

    #[test]
    fn transposed_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, n, k) = (5, 6, 7);
        let at = random(k * m, &mut rng); // k x m, used transposed
        let bt = random(n * k, &mut rng); // n x k, used transposed
        let mut fast = vec![0.0; m * n];
        let mut slow = vec![0.0; m * n];
        gemm(m, n, k, MatRef::transposed(&at, m), MatRef::transposed(&bt, k), &mut fast, false);
        gemm_reference(m, n, k, MatRef::transposed(&at, m), MatRef::transposed(&bt, k), &mut slow, false);
        assert_eq!(fast, slow);
        let expect: f64 = (0..k).map(|p| at[p * m + 2] * bt[3 * k + p]).fold(0.0, |s, v| s + v);
        assert_eq!(fast[2 * n + 3], expect);
    }

    #[test]
    fn f32_all_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, n, k) = (19, 70, 40);
        let a: Vec<f32> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut slow = vec![0.0f32; m * n];
        gemm_reference(m, n, k, MatRef::row_major(&a, k), MatRef::row_major(&b, n), &mut slow, false);
        let mut generic = vec![0.0f32; m * n];
        gemm_blocked::<f32, Portable, 4, 8>(
            m,
            n,
            k,
            MatRef::row_major(&a, k),
            BSource::Strided(MatRef::row_major(&b, n)),
            &mut generic,
            false,
        );
        assert_eq!(generic, slow);
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            let mut v = vec![0.0f32; m * n];
            gemm_blocked::<f32, simd::Avx2, 6, 16>(
                m,
                n,
                k,
                MatRef::row_major(&a, k),
                BSource::Strided(MatRef::row_major(&b, n)),
                &mut v,
                false,
            );
            assert_eq!(v, slow);
        }
    }
}
