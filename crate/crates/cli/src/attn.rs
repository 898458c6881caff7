//! Attention-map export: runs one phantom sample through a trained model
//! with weight capture enabled, saves the cross-view attention tensors, and
//! renders a heat overlay for the grid-center query token of each view.

use std::path::Path;

use serde::Serialize;
use transfusion_core::fusion::Capture;
use transfusion_core::graph::Graph;
use transfusion_core::network::{ModelConfig, TransFusionModel};
use transfusion_core::synthdata::generate_sample;
use transfusion_core::tensor::Tensor;
use transfusion_core::tft;

use crate::render;
use crate::run::{self, code_version};
use crate::CmdError;

pub const DUMP_SCHEMA: &str = "attention-dump/1";

#[derive(Serialize)]
struct KeySegment {
    view: String,
    grid: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize)]
struct Export {
    name: String,
    file: String,
    shape: Vec<usize>,
    query_view: String,
    query_grid: Vec<usize>,
    keys: Vec<KeySegment>,
}

#[derive(Serialize)]
struct Overlay {
    file: String,
    query_view: String,
    query_token: usize,
    query_pos: Vec<usize>,
    key_view: String,
}

#[derive(Serialize)]
struct DumpIndex {
    schema: String,
    level: usize,
    sample_seed: u64,
    code_version: String,
    exports: Vec<Export>,
    overlays: Vec<Overlay>,
}

pub fn dump_attention(
    cfg: &ModelConfig,
    params: &transfusion_core::params::ParamStore<f32>,
    sample_seed: u64,
    level: usize,
    out: &Path,
) -> Result<(), CmdError> {
    if !cfg.difa_levels.contains(&level) {
        return Err(CmdError::validation(format!(
            "level {level} has no cross-view attention; this model fuses at {:?}",
            cfg.difa_levels
        )));
    }
    let model =
        TransFusionModel::new(cfg.clone()).map_err(|e| CmdError::validation(e.to_string()))?;
    let (_, bundle) = generate_sample::<f32>(sample_seed, 0);

    let mut g = Graph::<f32>::new();
    let bound = params.bind(&mut g, false);
    let images: Vec<_> = bundle
        .views
        .iter()
        .map(|view| {
            let mut shape = vec![1usize];
            shape.extend_from_slice(view.image.shape());
            Ok(g.constant(view.image.reshaped(&shape)?))
        })
        .collect::<Result<_, _>>()
        .map_err(|e: transfusion_core::error::Error| CmdError::runtime(e.to_string()))?;
    let mut capture = Capture::on();
    model
        .forward(&mut g, &bound, &images, &mut capture)
        .map_err(|e| CmdError::runtime(e.to_string()))?;

    let mut exports = Vec::new();
    let mut overlays = Vec::new();
    for (vi, view_cfg) in cfg.views.iter().enumerate() {
        let name = format!("difa{level}.{}", view_cfg.name);
        let id = capture
            .entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| CmdError::runtime(format!("no captured weights named {name:?}")))?;
        let weights = g.value(id).clone();
        let query_grid = cfg.token_grid(vi, level);
        let n_query: usize = query_grid.iter().product();
        if weights.shape()[1] != n_query {
            return Err(CmdError::runtime(format!(
                "{name}: {} query rows, token grid {query_grid:?}",
                weights.shape()[1]
            )));
        }

        let mut keys = Vec::new();
        let mut offset = 0;
        for (oi, other) in cfg.views.iter().enumerate() {
            if oi == vi {
                continue;
            }
            let grid = cfg.token_grid(oi, level);
            let len: usize = grid.iter().product();
            keys.push(KeySegment { view: other.name.clone(), grid, offset, len });
            offset += len;
        }
        if weights.shape()[2] != offset {
            return Err(CmdError::runtime(format!(
                "{name}: {} key columns, other views supply {offset}",
                weights.shape()[2]
            )));
        }

        let file = format!("{name}.tft");
        tft::write_tensor(&out.join(&file), &weights)
            .map_err(|e| CmdError::runtime(e.to_string()))?;

        let query_pos: Vec<usize> = query_grid.iter().map(|&e| e / 2).collect();
        let query_token = flat_index(&query_pos, &query_grid);
        for seg in &keys {
            let key_index = cfg.views.iter().position(|v| v.name == seg.view).unwrap();
            let heat = mean_head_row(&weights, query_token, seg.offset, seg.len);
            let file = format!("overlay_{}_to_{}.png", view_cfg.name, seg.view);
            render_overlay(
                &out.join(&file),
                &heat,
                &seg.grid,
                &bundle.views[key_index].image,
            )?;
            overlays.push(Overlay {
                file,
                query_view: view_cfg.name.clone(),
                query_token,
                query_pos: query_pos.clone(),
                key_view: seg.view.clone(),
            });
        }
        exports.push(Export {
            name,
            file,
            shape: weights.shape().to_vec(),
            query_view: view_cfg.name.clone(),
            query_grid,
            keys,
        });
    }

    let index = DumpIndex {
        schema: DUMP_SCHEMA.to_string(),
        level,
        sample_seed,
        code_version: code_version(),
        exports,
        overlays,
    };
    run::write_json(&out.join("index.json"), &index)
}

fn flat_index(pos: &[usize], grid: &[usize]) -> usize {
    pos.iter().zip(grid).fold(0, |acc, (&p, &e)| acc * e + p)
}

/// One query's attention row, averaged over heads: `[heads, n, m]` -> `[len]`.
fn mean_head_row(weights: &Tensor<f32>, query: usize, offset: usize, len: usize) -> Vec<f64> {
    let (heads, n, m) = (weights.shape()[0], weights.shape()[1], weights.shape()[2]);
    let mut row = vec![0.0f64; len];
    for h in 0..heads {
        let base = (h * n + query) * m + offset;
        for (slot, v) in row.iter_mut().enumerate() {
            *v += weights.data()[base + slot] as f64;
        }
    }
    for v in &mut row {
        *v /= heads as f64;
    }
    row
}

/// Upsamples the token heat to image resolution, normalizes to peak 1, and
/// blends it over the grayscale image; 3D volumes render as a slice mosaic.
fn render_overlay(
    path: &Path,
    heat: &[f64],
    grid: &[usize],
    image: &Tensor<f32>,
) -> Result<(), CmdError> {
    let shape = image.shape();
    let peak = heat.iter().cloned().fold(f64::MIN, f64::max).max(1e-12);

    let heat_at = |pos: &[usize]| -> f64 {
        let tok: Vec<usize> = pos
            .iter()
            .zip(shape)
            .zip(grid)
            .map(|((&p, &full), &g)| (p * g / full).min(g - 1))
            .collect();
        heat[flat_index(&tok, grid)] / peak
    };
    let blend = |pos: &[usize], img_value: f32| -> f64 {
        0.35 * (img_value as f64).clamp(0.0, 1.0) + 0.65 * heat_at(pos)
    };

    if shape.len() == 2 {
        let (h, w) = (shape[0], shape[1]);
        let mut px = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                px[y * w + x] = blend(&[y, x], image.data()[y * w + x]);
            }
        }
        render::write_gray_png(path, w, h, &px)
    } else {
        let (d, h, w) = (shape[0], shape[1], shape[2]);
        let rows = (d as f64).sqrt().floor().max(1.0) as usize;
        let cols = d.div_ceil(rows);
        let (mh, mw) = (rows * h, cols * w);
        let mut px = vec![0.0; mh * mw];
        for k in 0..d {
            let (ty, tx) = (k / cols * h, k % cols * w);
            for y in 0..h {
                for x in 0..w {
                    px[(ty + y) * mw + tx + x] =
                        blend(&[k, y, x], image.data()[(k * h + y) * w + x]);
                }
            }
        }
        render::write_gray_png(path, mw, mh, &px)
    }
}
