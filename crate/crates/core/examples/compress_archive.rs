//! Full pipeline: synthesize a dump, compress it to an archive on disk,
//! print the ratio report and read the archive back.

use spindlekv::format::{read_archive, write_archive, write_dump};
use spindlekv::pipeline::{reconstruct_dump, CompressionOptions};
use spindlekv::simulator::{generate_synthetic, SyntheticSpec};
use spindlekv::{compress, ModelConfig};

fn main() -> spindlekv::Result<()> {
    let dir = std::env::temp_dir().join("spindlekv-example");
    std::fs::create_dir_all(&dir)?;

    let cfg = ModelConfig::new(128, 8, 4, 6)?;
    let dump = generate_synthetic(&SyntheticSpec::clusters(12, 0.97, 0.7).with_seed(9), &cfg, 256)?;
    write_dump(&dump, dir.join("cache.spkv"))?;

    let opts = CompressionOptions { ratio: 0.3, ..Default::default() };
    let out = compress(&dump, &opts)?;
    let path = dir.join("cache.spkc");
    write_archive(&out.archive, &path)?;

    println!("layer   r1      r2      r_layer   |C_K| |C_V|");
    for (l, (k, v)) in out
        .report
        .per_layer
        .iter()
        .zip(out.report.key_codebook_sizes.iter().zip(&out.report.value_codebook_sizes))
    {
        println!("{:>5}  {:.4}  {:.4}  {:.6}  {k:>5} {v:>5}", l.layer, l.r1, l.r2, l.r_layer);
    }
    println!("r = {:.6}; exact payload ratio = {:.6}", out.report.r, out.report.exact_ratio);

    let bytes = std::fs::metadata(&path)?.len();
    println!(
        "archive: {bytes} bytes = {} payload bits + {} header bits",
        out.report.exact_bits_compressed, out.report.header_bits
    );

    let back = read_archive(&path)?;
    let rebuilt = reconstruct_dump(&back, false)?;
    println!("reconstructed {} layers, {} tokens in layer 0 head 0", rebuilt.layers.len(), rebuilt.layers[0].cache.heads[0].len());
    Ok(())
}
