//! Writes a synthetic labeled set as CEMB, reads the header back, then the
//! whole file, and checks the round trip is exact.
//!
//!     cargo run --example cemb_roundtrip

use cual::embedding::{decode, encode, generate_synthetic, read_embeddings, read_header, write_embeddings, SyntheticSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let set = generate_synthetic(&SyntheticSpec::new(3, 8, 5, 4.0, 11))?;
    let path = std::env::temp_dir().join("cual_roundtrip.cemb");
    write_embeddings(&set, &path)?;

    let bytes = std::fs::read(&path)?;
    let header = read_header(&bytes)?;
    println!("{}: {} bytes, header {header:?}", path.display(), bytes.len());

    let back = read_embeddings(&path)?;
    assert_eq!(back, set);
    assert_eq!(decode(&encode(&set))?, set);
    println!("first row {:?} label {:?}", back.row(0), back.label(0));

    // unlabeled sets drop the label block
    let bare = encode(&set.unlabeled());
    println!("unlabeled encoding is {} bytes shorter", bytes.len() - bare.len());
    std::fs::remove_file(&path).ok();
    Ok(())
}
