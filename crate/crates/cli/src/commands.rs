use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rwass::compression::{compress, CompressedField, Codec};
use rwass::ensemble::{
    ari, curves_to_csv, curves_to_svg, distance, distance_matrix, mds_embed, nmi, persistence_curves, track, views,
    DistanceMatrix, Member, Method, Preprocess, Representation,
};
use rwass::field::{add_noise, load_csv, load_rsf, random_hills, save_rsf, synth_hills, Dtype, ScalarGrid};
use rwass::region::{Background, GroundMetric, GroundParams};
use rwass::topology::{MergeTree, PersistencePair, Segmentation, TreeKind};
use rwass::wasserstein::DistanceParams;

use crate::{BackgroundArg, CodecArg, Command, InputError, MethodArg, Opts, RepArg};

/// Topology stored next to a `.rwc` container, so the compressed member keeps its pairs.
#[derive(Serialize, Deserialize)]
struct DiagramFile {
    kind: TreeKind,
    simplify: f64,
    pairs: Vec<PersistencePair>,
    tree: MergeTree,
}

#[derive(Serialize)]
struct Provenance<'a> {
    tool: &'static str,
    version: &'static str,
    #[serde(flatten)]
    command: &'a Command,
    config: &'a Opts,
    outputs: Vec<PathBuf>,
}

fn input_error(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn required_out(opts: &Opts) -> Result<&Path> {
    opts.out.as_deref().ok_or_else(|| input_error("this subcommand needs --out"))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

fn provenance(command: &Command, opts: &Opts, outputs: Vec<PathBuf>) -> Result<()> {
    let Some(main) = outputs.first() else { return Ok(()) };
    let p = Provenance {
        tool: "rwass",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config: opts,
        outputs: outputs.clone(),
    };
    write_json(&with_suffix(main, ".provenance.json"), &p)
}

fn preprocess(opts: &Opts) -> Preprocess {
    Preprocess {
        kind: TreeKind::Split,
        simplify: opts.simplify,
        eps1: opts.eps1,
    }
}

fn method(opts: &Opts) -> Method {
    Method {
        rep: match opts.rep {
            RepArg::Diagram => Representation::Diagram,
            RepArg::Mergetree => Representation::MergeTree,
        },
        params: DistanceParams {
            metric: match opts.method {
                MethodArg::Classic => GroundMetric::Classic,
                MethodArg::Lifting => GroundMetric::Lifting,
                MethodArg::Volume => GroundMetric::Volume,
                MethodArg::Region => GroundMetric::Region,
            },
            ground: GroundParams {
                q: opts.q,
                lambda: opts.lambda,
                background: match opts.background {
                    BackgroundArg::Null => Background::Null,
                    BackgroundArg::Data => Background::Data,
                },
                w_l: opts.w_l,
                w_v: opts.w_v,
            },
        },
    }
}

fn has_ext(path: &Path, ext: &str) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn load_grid(path: &Path) -> Result<ScalarGrid> {
    let g = if has_ext(path, "csv") { load_csv(path)? } else { load_rsf(path)? };
    Ok(g)
}

fn load_member(path: &Path, opts: &Opts) -> Result<Member> {
    let pre = preprocess(opts);
    if !has_ext(path, "rwc") {
        return Ok(Member::prepare(Arc::new(load_grid(path)?), &pre)?);
    }
    let field = CompressedField::load(path)?;
    let side = with_suffix(path, ".diagram.json");
    let text = fs::read_to_string(&side).with_context(|| format!("reading {}", side.display()))?;
    let d: DiagramFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", side.display()))?;
    let grid = Arc::new(field.decompress()?);
    let segmentation = Segmentation {
        pair_of: field.membership.iter().map(|&m| m as usize).collect(),
    };
    Ok(Member::from_parts(grid, d.tree, d.pairs, segmentation, &pre)?)
}

fn load_members(paths: &[PathBuf], opts: &Opts) -> Result<Vec<Member>> {
    let members: Vec<Member> = paths.par_iter().map(|p| load_member(p, opts)).collect::<Result<_>>()?;
    if let Some(first) = members.first() {
        for (m, p) in members.iter().zip(paths) {
            if m.grid.dims() != first.grid.dims() {
                return Err(rwass::Error::Mismatch(format!(
                    "{} has dims {:?}, {} has {:?}",
                    p.display(),
                    m.grid.dims(),
                    paths[0].display(),
                    first.grid.dims()
                ))
                .into());
            }
        }
    }
    Ok(members)
}

/// Twelve significant digits, without exponent for moderate magnitudes.
fn sig12(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if (-5..12).contains(&mag) {
        format!("{:.*}", (11 - mag).max(0) as usize, x)
    } else {
        format!("{x:.11e}")
    }
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    let dims: Vec<usize> = s
        .split(['x', 'X', ','])
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| input_error(format!("cannot parse dims {s:?}; expected e.g. 64x64")))?;
    if dims.is_empty() || dims.len() > 3 || dims.contains(&0) {
        return Err(input_error(format!("dims {s:?} must list one to three positive extents")));
    }
    Ok(dims)
}

fn read_labels(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

pub fn run(command: &Command, opts: &Opts) -> Result<()> {
    match command {
        Command::Synth { dims, hills, noise } => {
            let out = required_out(opts)?;
            let dims = parse_dims(dims)?;
            let mut grid = synth_hills(&dims, &random_hills(&dims, *hills, opts.seed))?;
            if let Some(a) = noise {
                grid = add_noise(&grid, *a, opts.seed.wrapping_add(1))?;
            }
            save_rsf(&grid, out, Dtype::F64)?;
            provenance(command, opts, vec![out.to_path_buf()])
        }
        Command::Diagram { input } => {
            let out = required_out(opts)?;
            let m = load_member(input, opts)?;
            let seg_path = out.with_extension("segmentation.rsf");
            let ids = m.segmentation.pair_of.iter().map(|&p| p as f64).collect();
            save_rsf(&m.grid.with_values(ids)?, &seg_path, Dtype::F64)?;
            let d = DiagramFile {
                kind: TreeKind::Split,
                simplify: opts.simplify,
                pairs: m.pairs,
                tree: m.tree,
            };
            write_json(out, &d)?;
            provenance(command, opts, vec![out.to_path_buf(), seg_path])
        }
        Command::Dist { a, b } => {
            let members = load_members(&[a.clone(), b.clone()], opts)?;
            let vs = views(&members, opts.lambda)?;
            let (d, matching) = distance(&vs[0], &vs[1], &method(opts))?;
            println!("{}", sig12(d));
            let mut outputs = Vec::new();
            if let Some(out) = &opts.out {
                write(out, sig12(d) + "\n")?;
                outputs.push(out.clone());
            }
            if let Some(path) = &opts.matching {
                write_json(path, &matching)?;
                outputs.push(path.clone());
            }
            provenance(command, opts, outputs)
        }
        Command::Matrix { inputs } => {
            let out = required_out(opts)?;
            let members = load_members(inputs, opts)?;
            let m = method(opts);
            let matrix = distance_matrix(&views(&members, opts.lambda)?, &m)?;
            write(out, matrix.to_csv())?;
            let g = &m.params.ground;
            let meta = serde_json::json!({
                "method": m.params.metric,
                "rep": m.rep,
                "q": g.q,
                "lambda": g.lambda,
                "eps1": opts.eps1,
                "background": g.background,
                "w_l": g.w_l,
                "w_v": g.w_v,
            });
            let meta_path = with_suffix(out, ".json");
            write_json(&meta_path, &meta)?;
            provenance(command, opts, vec![out.to_path_buf(), meta_path])
        }
        Command::Embed { matrix } => {
            let text = fs::read_to_string(matrix).with_context(|| format!("reading {}", matrix.display()))?;
            let m = DistanceMatrix::from_csv(&text, method(opts), opts.eps1)?;
            let csv = mds_embed(&m, 2).to_csv();
            match &opts.out {
                Some(out) => {
                    write(out, csv)?;
                    provenance(command, opts, vec![out.clone()])
                }
                None => {
                    print!("{csv}");
                    Ok(())
                }
            }
        }
        Command::Track { inputs } => {
            let members = load_members(inputs, opts)?;
            let graph = track(&views(&members, opts.lambda)?, &method(opts))?;
            match &opts.out {
                Some(out) => {
                    write_json(out, &graph)?;
                    provenance(command, opts, vec![out.clone()])
                }
                None => {
                    println!("{}", serde_json::to_string_pretty(&graph)?);
                    Ok(())
                }
            }
        }
        Command::Curves { inputs } => {
            let out = required_out(opts)?;
            let members = load_members(inputs, opts)?;
            let seq = views(&members, opts.lambda)?;
            let graph = track(&seq, &method(opts))?;
            let rows = persistence_curves(&graph, &seq, opts.topk);
            write(out, curves_to_csv(&rows)?)?;
            let svg = out.with_extension("svg");
            write(&svg, curves_to_svg(&rows, seq.len()))?;
            provenance(command, opts, vec![out.to_path_buf(), svg])
        }
        Command::Scores { a, b } => {
            let (la, lb) = (read_labels(a)?, read_labels(b)?);
            let (n, r) = (nmi(&la, &lb)?, ari(&la, &lb)?);
            println!("nmi {}\nari {}", sig12(n), sig12(r));
            match &opts.out {
                Some(out) => {
                    write_json(out, &serde_json::json!({ "nmi": n, "ari": r }))?;
                    provenance(command, opts, vec![out.clone()])
                }
                None => Ok(()),
            }
        }
        Command::Compress { input } => {
            let out = required_out(opts)?;
            let tau = opts.tau.ok_or_else(|| input_error("compress needs --tau"))?;
            let m = load_member(input, opts)?;
            let codec = match opts.codec {
                CodecArg::Quantizer => Codec::Quantizer,
                CodecArg::Bspline => Codec::Bspline,
            };
            let field = compress(&m.grid, &m.segmentation.pair_of, codec, tau)?;
            field.save(out)?;
            let side = with_suffix(out, ".diagram.json");
            let d = DiagramFile {
                kind: TreeKind::Split,
                simplify: opts.simplify,
                pairs: m.pairs,
                tree: m.tree,
            };
            write_json(&side, &d)?;
            provenance(command, opts, vec![out.to_path_buf(), side])
        }
    }
}
