use spindlekv::format::{
    archive_fixed_header_bytes, decode_archive, decode_dump, encode_archive, encode_dump, layer_header_bytes,
    read_dump, write_csv, write_dump, write_report_csv,
};
use spindlekv::pipeline::{census, CompressionOptions};
use spindlekv::simulator::{generate_synthetic, SyntheticSpec};
use spindlekv::{compress, unfold_gqa, Error, KvDump, ModelConfig};

fn dump(seed: u64) -> KvDump {
    let cfg = ModelConfig::new(16, 4, 2, 2).unwrap();
    generate_synthetic(&SyntheticSpec::clusters(4, 0.96, 0.5).with_seed(seed), &cfg, 40).unwrap()
}

fn archive_bytes(d: &KvDump) -> Vec<u8> {
    encode_archive(&compress(d, &CompressionOptions { ratio: 0.5, ..Default::default() }).unwrap().archive).unwrap()
}

#[test]
fn dump_file_round_trip() {
    let d = dump(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.spkv");
    write_dump(&d, &path).unwrap();
    assert_eq!(read_dump(&path).unwrap(), d);
}

#[test]
fn dump_variants_round_trip() {
    let mut d = dump(2);
    d.keys_rotated = true;
    d.layers[1].windows = None;
    d.layers[0].cache = unfold_gqa(&d.layers[0].cache, &d.config).unwrap();
    let bytes = encode_dump(&d).unwrap();
    let back = decode_dump(&bytes).unwrap();
    assert_eq!(back, d);
    assert_eq!(encode_dump(&back).unwrap(), bytes);
}

#[test]
fn bad_magic_and_version() {
    let mut bytes = encode_dump(&dump(3)).unwrap();
    bytes[4] = 9;
    assert!(matches!(decode_dump(&bytes), Err(Error::UnsupportedVersion { found: 9, .. })));
    bytes[0] = b'X';
    let err = decode_dump(&bytes).unwrap_err();
    assert!(err.to_string().starts_with("bad magic"), "{err}");

    let archive = archive_bytes(&dump(3));
    assert!(matches!(decode_dump(&archive), Err(Error::BadMagic { .. })));
}

#[test]
fn truncation_and_trailing_bytes() {
    let bytes = encode_dump(&dump(4)).unwrap();
    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode_dump(&bytes[..cut]), Err(Error::Truncated(_))), "cut {cut}");
    }
    let archive = archive_bytes(&dump(4));
    assert!(matches!(decode_archive(&archive[..archive.len() - 2]), Err(Error::Truncated(_))));
    let mut longer = archive.clone();
    longer.push(0);
    assert!(decode_archive(&longer).is_err());
}

#[test]
fn reference_out_of_range_is_reported() {
    let d = dump(5);
    let out = compress(&d, &CompressionOptions { ratio: 0.5, ..Default::default() }).unwrap();
    let mut bytes = encode_archive(&out.archive).unwrap();
    let l0 = &out.archive.layers[0].compressed;
    let entry_bytes = l0.codebook_size() * d.config.head_dim * 2;
    // first record: position, then key ref
    let at = archive_fixed_header_bytes(2) + layer_header_bytes(l0.heads.len()) + entry_bytes + 4;
    bytes[at..at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
    let err = decode_archive(&bytes).unwrap_err();
    assert!(err.to_string().starts_with("corrupt archive: reference out of range"), "{err}");
}

#[test]
fn archive_round_trip_at_both_widths() {
    for key_bits in [16, 32] {
        let mut d = dump(6);
        d.config = d.config.clone().with_storage_bits(key_bits, 32);
        let bytes = archive_bytes(&d);
        let back = decode_archive(&bytes).unwrap();
        assert_eq!(encode_archive(&back).unwrap(), bytes);
        let bits = back.exact_bits();
        assert_eq!(bits.payload + bits.header, bytes.len() as u64 * 8);
    }
}

#[test]
fn unsupported_index_width_rejected() {
    let mut d = dump(7);
    d.config = d.config.clone().with_storage_bits(16, 16);
    let out = compress(&d, &CompressionOptions { ratio: 0.5, ..Default::default() }).unwrap();
    assert!(encode_archive(&out.archive).is_err());
}

#[test]
fn csv_headers() {
    let d = dump(8);
    let out = compress(&d, &CompressionOptions { ratio: 0.5, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.csv");
    write_report_csv(&out.report, &report).unwrap();
    let text = std::fs::read_to_string(&report).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("layer,r1,r2,r3,r_layer"));
    assert_eq!(lines.count(), 2);

    let c = census(&d, 0.98, 0.95, 8).unwrap();
    let pairs = dir.path().join("c.csv");
    write_csv(&c.pairs, &pairs).unwrap();
    let text = std::fs::read_to_string(&pairs).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "layer,head,tokens,key_threshold,value_threshold,key_pairs,value_pairs,total_pairs"
    );
}
