//! Writes an ETT-shaped synthetic CSV: `synthetic_ett OUT.csv [ROWS] [SEED]`.

fn main() {
    let mut args = std::env::args().skip(1);
    let Some(out) = args.next() else {
        eprintln!("usage: synthetic_ett OUT.csv [ROWS] [SEED]");
        std::process::exit(1);
    };
    let rows = args.next().map_or(Ok(20_000), |s| s.parse()).expect("ROWS must be an integer");
    let seed = args.next().map_or(Ok(0), |s| s.parse()).expect("SEED must be an integer");
    let ds = jtft::synthetic::ett_like(rows, seed);
    if let Err(e) = ds.write_csv(std::path::Path::new(&out)) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
