//! Files in and out: image folders, PNG grids, plots, traces.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use hypermod::{ImageSet, Tensor};
use image::{imageops, ImageFormat, RgbImage};
use serde::Serialize;

use crate::error::{Result, ToolError};

const IMAGE_EXTS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Writes through a temp file in the same directory and renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(ToolError::io(parent))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp-{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(ToolError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(ToolError::io(path))
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .map_err(ToolError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
        .collect();
    v.sort();
    Ok(v)
}

fn is_image(p: &Path) -> bool {
    p.is_file()
        && p.extension().is_some_and(|e| IMAGE_EXTS.contains(&e.to_string_lossy().to_lowercase().as_str()))
}

fn decode(p: &Path, resolution: usize, out: &mut Vec<f32>) -> Result<()> {
    let img = image::open(p).map_err(|e| ToolError::Data(format!("{}: {e}", p.display())))?.to_rgb8();
    let r = resolution as u32;
    let img = if img.dimensions() == (r, r) { img } else { imageops::resize(&img, r, r, imageops::FilterType::Triangle) };
    for c in 0..3 {
        for px in img.pixels() {
            out.push(px[c] as f32 / 127.5 - 1.0);
        }
    }
    Ok(())
}

/// Loads a folder of images. Subfolders are classes in sorted name order;
/// a folder with images and no subfolders is a single unlabeled class.
/// Images are resized to `resolution`, grayscale is expanded to RGB, and
/// values are scaled to `[-1, 1]`.
pub fn load_image_folder(root: &Path, resolution: usize) -> Result<ImageSet<f32>> {
    if !root.is_dir() {
        return Err(ToolError::Data(format!("dataset folder not found: {}", root.display())));
    }
    let entries = sorted_entries(root)?;
    let class_dirs: Vec<_> = entries.iter().filter(|p| p.is_dir()).cloned().collect();
    let groups: Vec<(String, Vec<std::path::PathBuf>)> = if class_dirs.is_empty() {
        vec![("all".to_string(), entries.into_iter().filter(|p| is_image(p)).collect())]
    } else {
        class_dirs
            .iter()
            .map(|d| {
                let name = d.file_name().unwrap_or_default().to_string_lossy().into_owned();
                Ok((name, sorted_entries(d)?.into_iter().filter(|p| is_image(p)).collect()))
            })
            .collect::<Result<_>>()?
    };
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (c, (name, files)) in groups.iter().enumerate() {
        if files.is_empty() {
            return Err(ToolError::Data(format!(
                "class {name:?} has no images ({})",
                if class_dirs.is_empty() { root.display().to_string() } else { class_dirs[c].display().to_string() }
            )));
        }
        for f in files {
            decode(f, resolution, &mut data)?;
            labels.push(c);
        }
    }
    let images = Tensor::from_vec(&[labels.len(), 3, resolution, resolution], data)?;
    Ok(ImageSet::new(images, labels, groups.into_iter().map(|g| g.0).collect())?)
}

/// One image `[3, R, R]` in `[-1, 1]` as RGB8.
pub fn to_rgb(chw: &[f64], r: usize) -> RgbImage {
    let rr = r * r;
    RgbImage::from_fn(r as u32, r as u32, |x, y| {
        let i = y as usize * r + x as usize;
        let q = |c: usize| ((chw[c * rr + i] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        image::Rgb([q(0), q(1), q(2)])
    })
}

pub fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| ToolError::Other(format!("png encoding: {e}")))?;
    Ok(buf.into_inner())
}

/// Writes an image set as `root/<class>/<index>.png`.
pub fn save_image_folder(set: &ImageSet<f32>, root: &Path) -> Result<()> {
    let r = set.resolution();
    let per = 3 * r * r;
    let data = set.images().to_f64_vec();
    for (i, &l) in set.labels().iter().enumerate() {
        let img = to_rgb(&data[i * per..(i + 1) * per], r);
        write_atomic(&root.join(&set.class_names()[l]).join(format!("{i:05}.png")), &png_bytes(&img)?)?;
    }
    Ok(())
}

pub const GRID_PAD: usize = 2;

/// Tiles `images` `[rows·cols, 3, R, R]` row-major with a `GRID_PAD` border.
pub fn grid(images: &Tensor<f64>, rows: usize, cols: usize) -> Result<RgbImage> {
    let s = images.shape();
    if s.len() != 4 || s[0] != rows * cols {
        return Err(ToolError::Other(format!("grid of {rows}x{cols} from images {s:?}")));
    }
    let r = s[2];
    let w = cols * r + (cols + 1) * GRID_PAD;
    let h = rows * r + (rows + 1) * GRID_PAD;
    let mut out = RgbImage::from_pixel(w as u32, h as u32, image::Rgb([255, 255, 255]));
    let per = 3 * r * r;
    for i in 0..rows * cols {
        let tile = to_rgb(&images.data()[i * per..(i + 1) * per], r);
        let x = GRID_PAD + (i % cols) * (r + GRID_PAD);
        let y = GRID_PAD + (i / cols) * (r + GRID_PAD);
        imageops::replace(&mut out, &tile, x as i64, y as i64);
    }
    Ok(out)
}

pub fn save_grid(path: &Path, images: &Tensor<f64>, rows: usize, cols: usize) -> Result<()> {
    write_atomic(path, &png_bytes(&grid(images, rows, cols)?)?)
}

/// One record of a metric trace file.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub metric: String,
    /// Class name, or absent for means over classes.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub class: Option<String>,
    pub value: f64,
    pub extractor: String,
    pub k: usize,
}

pub fn jsonl<T: Serialize>(records: &[T]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
}

/// Keeps the lines of a step-keyed text file whose step is at most `max_step`.
/// Lines without a parsable step (headers) are kept.
pub fn truncate_after(text: &str, max_step: u64, step_of: impl Fn(&str) -> Option<u64>) -> String {
    text.lines().filter(|l| step_of(l).is_none_or(|s| s <= max_step)).map(|l| format!("{l}\n")).collect()
}

mod plot {
    use std::sync::OnceLock;

    use plotters::prelude::*;
    use plotters::style::{register_font, FontStyle};

    const FONT_PATHS: [&str; 2] =
        ["/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf", "/usr/share/fonts/TTF/DejaVuSans.ttf"];

    /// Registers a system font once; plots are drawn without text if none is found.
    pub fn has_font() -> bool {
        static FONT: OnceLock<bool> = OnceLock::new();
        *FONT.get_or_init(|| {
            FONT_PATHS.iter().any(|p| match std::fs::read(p) {
                Ok(bytes) => register_font("sans-serif", FontStyle::Normal, Box::leak(bytes.into_boxed_slice())).is_ok(),
                Err(_) => false,
            })
        })
    }

    pub fn draw(
        buf: &mut [u8],
        size: (u32, u32),
        title: &str,
        x_label: &str,
        series: &[(String, Vec<(f64, f64)>)],
    ) -> Result<(), Box<dyn std::error::Error>> {
        let text = has_font();
        let root = BitMapBackend::with_buffer(buf, size).into_drawing_area();
        root.fill(&WHITE)?;
        let pts = series.iter().flat_map(|s| s.1.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(x, y) in pts.filter(|p| p.1.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if x0 > x1 {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 - x0 < 1e-12 {
            x1 = x0 + 1.0;
        }
        let pad = ((y1 - y0) * 0.05).max(1e-9);
        let mut b = ChartBuilder::on(&root);
        b.margin(10);
        if text {
            b.caption(title, ("sans-serif", 20)).x_label_area_size(30).y_label_area_size(50);
        }
        let mut chart = b.build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))?;
        let mut mesh = chart.configure_mesh();
        if text {
            mesh.x_desc(x_label);
        } else {
            mesh.disable_x_axis().disable_y_axis();
        }
        mesh.draw()?;
        for (i, (name, pts)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            let s = chart.draw_series(LineSeries::new(pts.iter().copied().filter(|p| p.1.is_finite()), color.stroke_width(2)))?;
            if text {
                s.label(name.as_str())
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
            }
        }
        if text && series.len() > 1 {
            chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
        }
        root.present()?;
        Ok(())
    }
}

/// Line plot of `(x, y)` series written as PNG.
pub fn save_plot(path: &Path, title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let size = (640u32, 400u32);
    let mut buf = vec![0u8; (size.0 * size.1 * 3) as usize];
    plot::draw(&mut buf, size, title, x_label, series).map_err(|e| ToolError::Other(format!("plotting {title}: {e}")))?;
    let img = RgbImage::from_raw(size.0, size.1, buf).expect("buffer matches size");
    write_atomic(path, &png_bytes(&img)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_dimensions() {
        let imgs = Tensor::<f64>::zeros(&[6, 3, 8, 8]);
        let g = grid(&imgs, 2, 3).unwrap();
        assert_eq!(g.dimensions(), ((3 * 8 + 4 * GRID_PAD) as u32, (2 * 8 + 3 * GRID_PAD) as u32));
        assert_eq!(g.get_pixel(GRID_PAD as u32, GRID_PAD as u32).0, [128, 128, 128]);
        assert!(grid(&imgs, 2, 2).is_err());
    }

    #[test]
    fn plot_renders_with_and_without_points() {
        let dir = std::env::temp_dir().join(format!("hm-plot-{}", std::process::id()));
        let p = dir.join("a.png");
        save_plot(&p, "loss", "step", &[("d".into(), vec![(0.0, 1.0), (1.0, 0.5), (2.0, f64::NAN)])]).unwrap();
        assert_eq!(image::open(&p).unwrap().width(), 640);
        save_plot(&p, "empty", "step", &[]).unwrap();
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn truncation_keeps_headers() {
        let t = "step\tx\n1\ta\n2\tb\n3\tc\n";
        let out = truncate_after(t, 2, |l| l.split('\t').next()?.parse().ok());
        assert_eq!(out, "step\tx\n1\ta\n2\tb\n");
    }
}
