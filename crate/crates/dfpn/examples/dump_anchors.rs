//! Show the anchor layout: 9 shapes per cell (3 aspect ratios × 3 scales)
//! on every pyramid level, centered on the level's stride grid.
//!
//! Run with: cargo run --example dump_anchors

use dfpn::anchors::{dump_anchors_csv, generate_anchors, AnchorConfig};

fn main() -> dfpn::Result<()> {
    let cfg = AnchorConfig::default();
    let image = 64usize;

    println!("anchor shapes by stride (w x h, before clipping):");
    for level in 0..6 {
        let stride = 2usize << level;
        let cells = image / stride;
        let anchors = generate_anchors(cells, cells, stride, &cfg);
        print!("  stride {stride:>2} ({cells:>2}x{cells:<2} cells, {:>5} anchors):", anchors.len());
        // the first cell carries one anchor per (ratio, scale) pair
        for a in anchors.iter().take(cfg.anchors_per_location()) {
            print!(" {:.0}x{:.0}", a.width(), a.height());
        }
        println!();
    }

    // CSV dump of the coarsest two levels for plotting
    let mut csv = Vec::new();
    dump_anchors_csv(&mut csv, 5, 2, 2, 32, &cfg).expect("write to vec");
    dump_anchors_csv(&mut csv, 6, 1, 1, 64, &cfg).expect("write to vec");
    let path = std::env::temp_dir().join("dfpn_anchors.csv");
    std::fs::write(&path, &csv).map_err(|e| dfpn::Error::Io { path: path.clone(), source: e })?;
    println!("wrote {} CSV bytes to {}", csv.len(), path.display());
    Ok(())
}
