use transfusion_core::synthdata::{generate_sample, LA_SHAPE};

fn main() {
    let mut banded = 0usize;
    let mut covered = 0usize;
    let mut partial = 0usize;
    let mut rv_px_cov = Vec::new();
    for idx in 200..250usize {
        let (ph, bundle) = generate_sample::<f32>(0, idx);
        let la = &bundle.views[1].labels;
        let mut lo = usize::MAX;
        let mut hi = 0usize;
        let mut n = 0usize;
        for r in 0..LA_SHAPE[0] {
            for c in 0..LA_SHAPE[1] {
                if la[r * LA_SHAPE[1] + c] == 3 {
                    lo = lo.min(r);
                    hi = hi.max(r);
                    n += 1;
                }
            }
        }
        if !ph.corrupt_la {
            continue;
        }
        banded += 1;
        let b0 = ph.la_band_row;
        let b1 = ph.la_band_row + ph.la_band_rows;
        if n == 0 {
            continue;
        }
        if b0 <= lo && b1 > hi {
            covered += 1;
            rv_px_cov.push(n);
        } else if lo < b1 && hi >= b0 {
            partial += 1;
        }
    }
    println!("test: banded {banded}/50, rv fully covered {covered}, partially {partial}");
    println!("covered blob px: {:?}", rv_px_cov);
}
