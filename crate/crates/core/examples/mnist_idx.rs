//! Reads MNIST IDX files (or a generated stand-in) and writes a PGM grid.
//!
//! ```text
//! cargo run --example mnist_idx -- [images.idx labels.idx] out.pgm
//! ```

use std::path::PathBuf;

use snlab::data::{encode_idx_images, encode_idx_labels, load_mnist_idx, read_pgm, write_pgm_grid};

fn main() -> snlab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let dir = std::env::temp_dir().join("snlab_idx_example");
    std::fs::create_dir_all(&dir)?;
    let (images, labels, out) = if args.len() >= 3 {
        (PathBuf::from(&args[0]), PathBuf::from(&args[1]), PathBuf::from(&args[2]))
    } else {
        // 16 synthetic 28x28 digits: diagonal stripes whose slope is the label
        let (n, h, w) = (16, 28, 28);
        let mut px = Vec::with_capacity(n * h * w);
        for k in 0..n {
            for y in 0..h {
                for x in 0..w {
                    px.push(if (x + y * (k % 10 + 1)) % 9 < 3 { 255 } else { 0 });
                }
            }
        }
        let lab: Vec<u8> = (0..n as u8).map(|k| k % 10).collect();
        std::fs::write(dir.join("images.idx"), encode_idx_images(n, h, w, &px))?;
        std::fs::write(dir.join("labels.idx"), encode_idx_labels(&lab))?;
        (dir.join("images.idx"), dir.join("labels.idx"), args.first().map_or(dir.join("grid.pgm"), PathBuf::from))
    };

    let batch = load_mnist_idx(&images, &labels)?;
    println!("loaded {} images of {:?}, labels {:?}", batch.len(), &batch.dims()[1..], &batch.labels[..batch.len().min(10)]);
    write_pgm_grid(&batch, 8, &out)?;
    let (w, h, _) = read_pgm(&out)?;
    println!("wrote {} ({w}x{h})", out.display());
    Ok(())
}
