//! Regenerates the bundled corpora under `fixtures/`.
//!
//! cargo run -p mslm --example make_fixtures

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use mslm::Rng;

const SUBJECTS: &[&str] = &["the company", "the market", "mr. <unk>", "investors", "the dollar", "the board", "analysts"];
const VERBS: &[&str] = &["said", "expects", "reported", "rose", "fell", "sold", "bought"];
const OBJECTS: &[&str] = &["N N", "$ N million", "its shares", "the stock", "a new plan", "the bonds"];
const TAILS: &[&str] = &[" .", " , analysts said .", " in the quarter .", " last year ."];
const SPECIAL: &str = "the quick brown fox jumps over the lazy dog , 1/2 & 3/4 # 5 * 6 - 7 \\ 8 ' 9 0 of the index .";

fn pick<'a>(rng: &mut Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.below(xs.len())]
}

fn char_text(rng: &mut Rng, bytes: usize) -> String {
    let mut out = String::new();
    let mut line = 0usize;
    while out.len() < bytes {
        if line.is_multiple_of(20) {
            out.push_str(SPECIAL);
        } else {
            // Strong subject→verb coupling keeps the entropy low.
            let s = rng.below(SUBJECTS.len());
            let v = if rng.uniform() < 0.8 { s % VERBS.len() } else { rng.below(VERBS.len()) };
            out.push_str(SUBJECTS[s]);
            out.push(' ');
            out.push_str(VERBS[v]);
            out.push(' ');
            out.push_str(OBJECTS[(s + v) % OBJECTS.len()]);
            out.push_str(pick(rng, TAILS));
        }
        out.push('\n');
        line += 1;
    }
    out
}

fn byte_text(rng: &mut Rng, bytes: usize) -> Vec<u8> {
    let high: Vec<u8> = (0x80u8..=0xEB).collect();
    let mut out = Vec::new();
    let mut k = 0usize;
    while out.len() < bytes {
        out.extend_from_slice(b"<page>\t<title>");
        out.extend_from_slice(pick(rng, SUBJECTS).as_bytes());
        out.extend_from_slice(b"</title>\n");
        for _ in 0..3 {
            out.push(high[k % high.len()]);
            k += 1;
        }
        let printable: Vec<u8> = (0x20u8..=0x7E).collect();
        for _ in 0..4 {
            out.push(printable[rng.below(printable.len())]);
        }
        out.extend_from_slice(b" [[");
        out.extend_from_slice(pick(rng, OBJECTS).as_bytes());
        out.extend_from_slice(b"]]</page>\n");
    }
    out
}

fn word_text(rng: &mut Rng, lines: usize) -> String {
    const ADJ: &[&str] = &["old", "new", "large", "small", "red"];
    const NOUN: &[&str] = &["city", "river", "castle", "road", "church", "bridge"];
    let mut out = String::new();
    for _ in 0..lines {
        let n = rng.below(NOUN.len());
        out.push_str(&format!(
            "The {} {} was built in the {} century , near the {} .\n",
            pick(rng, ADJ),
            NOUN[n],
            ["first", "second", "third"][rng.below(3)],
            NOUN[(n + 1) % NOUN.len()],
        ));
    }
    out
}

fn distinct(bytes: &[u8]) -> usize {
    bytes.iter().collect::<BTreeSet<_>>().len()
}

fn main() -> std::io::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    fs::create_dir_all(&dir)?;
    let mut rng = Rng::seed_from(2018);

    let full = char_text(&mut rng, 100_000);
    let cut = full[..10_000].rfind('\n').map_or(10_000, |i| i + 1);
    let small = &full[..cut];
    assert_eq!(distinct(full.as_bytes()), 51);
    assert_eq!(distinct(small.as_bytes()), 51);
    fs::write(dir.join("char_ptb.txt"), &full)?;
    fs::write(dir.join("char_ptb_10k.txt"), small)?;
    let rest = &full[cut..];
    let vcut = rest[..2_000].rfind('\n').map_or(2_000, |i| i + 1);
    fs::write(dir.join("char_ptb_valid.txt"), &rest[..vcut])?;

    let bytes = byte_text(&mut rng, 40_000);
    assert_eq!(distinct(&bytes), 205);
    fs::write(dir.join("bytes_205.txt"), &bytes)?;

    fs::write(dir.join("words.txt"), word_text(&mut rng, 600))?;
    Ok(())
}
