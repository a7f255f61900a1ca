//! Fixed-width record store.
//!
//! `<name>.records` starts with one JSON manifest line followed by `count`
//! records of `max_seq_len + 1` little-endian `u32`s: the true length, then
//! the token ids. The read path never touches the tokenizer.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use memmap2::Mmap;
use serde::{Deserialize, Serialize};

use super::vocab::{tokenize, Vocab, CLS, PAD, SEP};
use super::{DataError, Result};

const STORE_FORMAT: &str = "rtd-records";
const STORE_VERSION: u32 = 1;

/// Encoded sequence: `[CLS] tokens.. [SEP] [PAD]..`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceRecord {
    pub token_ids: Vec<u32>,
    pub true_length: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format: String,
    pub version: u32,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub count: usize,
}

impl StoreManifest {
    fn record_bytes(&self) -> usize {
        4 * (self.max_seq_len + 1)
    }
}

/// `<dir>/<name>.vocab` and `<dir>/<name>.records`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StorePaths {
    pub vocab: PathBuf,
    pub records: PathBuf,
}

impl StorePaths {
    pub fn new(dir: &Path, name: &str) -> Self {
        Self {
            vocab: dir.join(format!("{name}.vocab")),
            records: dir.join(format!("{name}.records")),
        }
    }

    /// Accepts either prefix `dir/name` or a path to one of the two files.
    pub fn from_prefix(prefix: &Path) -> Self {
        let base = match prefix.extension().and_then(|e| e.to_str()) {
            Some("records") | Some("vocab") => prefix.with_extension(""),
            _ => prefix.to_path_buf(),
        };
        let s = base.as_os_str().to_string_lossy();
        Self {
            vocab: PathBuf::from(format!("{s}.vocab")),
            records: PathBuf::from(format!("{s}.records")),
        }
    }
}

fn frame(chunk: &[u32], max_seq_len: usize) -> SequenceRecord {
    let mut ids = Vec::with_capacity(max_seq_len);
    ids.push(CLS);
    ids.extend_from_slice(chunk);
    ids.push(SEP);
    let true_length = ids.len();
    ids.resize(max_seq_len, PAD);
    SequenceRecord {
        token_ids: ids,
        true_length,
    }
}

/// Tokenizes `corpus` (one document per non-blank line), builds a
/// frequency-capped vocabulary and writes both store files. Lines longer
/// than `max_seq_len - 2` tokens are split across several records.
pub fn build_store(corpus: &Path, out_dir: &Path, name: &str, vocab_cap: usize, max_seq_len: usize) -> Result<RecordStore> {
    if max_seq_len < 3 {
        return Err(DataError::SeqLenTooSmall(max_seq_len));
    }
    let text = fs::read_to_string(corpus).map_err(|e| DataError::io(corpus, e))?;
    let docs: Vec<Vec<String>> = text.lines().map(tokenize).filter(|t| !t.is_empty()).collect();
    if docs.is_empty() {
        return Err(DataError::EmptyCorpus(corpus.display().to_string()));
    }
    let vocab = Vocab::build(docs.iter().flatten().map(String::as_str), vocab_cap)?;

    let body = max_seq_len - 2;
    let mut records = Vec::new();
    for doc in &docs {
        let ids: Vec<u32> = doc.iter().map(|t| vocab.id(t)).collect();
        records.extend(ids.chunks(body).map(|c| frame(c, max_seq_len)));
    }

    fs::create_dir_all(out_dir).map_err(|e| DataError::io(out_dir, e))?;
    let paths = StorePaths::new(out_dir, name);
    vocab.write(&paths.vocab)?;

    let manifest = StoreManifest {
        format: STORE_FORMAT.to_string(),
        version: STORE_VERSION,
        max_seq_len,
        vocab_size: vocab.len(),
        vocab_hash: vocab.hash(),
        count: records.len(),
    };
    let mut bytes = serde_json::to_vec(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    bytes.reserve(records.len() * manifest.record_bytes());
    for r in &records {
        bytes.extend_from_slice(&(r.true_length as u32).to_le_bytes());
        for id in &r.token_ids {
            bytes.extend_from_slice(&id.to_le_bytes());
        }
    }
    let mut f = File::create(&paths.records).map_err(|e| DataError::io(&paths.records, e))?;
    f.write_all(&bytes).map_err(|e| DataError::io(&paths.records, e))?;
    drop(f);

    RecordStore::open(&paths.records)
}

/// Read-only, memory-mapped view of a `.records` file.
#[derive(Debug)]
pub struct RecordStore {
    mmap: Mmap,
    manifest: StoreManifest,
    data_offset: usize,
}

impl RecordStore {
    /// Opens and validates a store: header, file size and every id.
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| DataError::io(path, e))?;
        // SAFETY: the store is immutable after build; the map is read-only.
        let mmap = unsafe { Mmap::map(&file) }.map_err(|e| DataError::io(path, e))?;
        let nl = mmap
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| DataError::Malformed("missing manifest line".into()))?;
        let manifest: StoreManifest =
            serde_json::from_slice(&mmap[..nl]).map_err(|e| DataError::Malformed(e.to_string()))?;
        if manifest.format != STORE_FORMAT || manifest.version != STORE_VERSION {
            return Err(DataError::Malformed(format!(
                "unsupported format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let data_offset = nl + 1;
        let expected = data_offset + manifest.count * manifest.record_bytes();
        if mmap.len() != expected {
            return Err(DataError::Malformed(format!(
                "file is {} bytes, manifest implies {expected}",
                mmap.len()
            )));
        }
        let store = Self {
            mmap,
            manifest,
            data_offset,
        };
        store.validate()?;
        Ok(store)
    }

    fn validate(&self) -> Result<()> {
        let (l, v) = (self.manifest.max_seq_len, self.manifest.vocab_size as u32);
        for i in 0..self.len() {
            let r = self.get(i);
            if r.true_length > l || r.true_length < 2 {
                return Err(DataError::Malformed(format!("record {i}: bad length {}", r.true_length)));
            }
            if r.token_ids.iter().any(|&id| id >= v) {
                return Err(DataError::Malformed(format!("record {i}: id out of vocabulary")));
            }
            if r.token_ids[r.true_length..].iter().any(|&id| id != PAD) {
                return Err(DataError::Malformed(format!("record {i}: non-pad id after true length")));
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    pub fn max_seq_len(&self) -> usize {
        self.manifest.max_seq_len
    }

    pub fn vocab_size(&self) -> usize {
        self.manifest.vocab_size
    }

    /// Record `i`; panics when out of range.
    pub fn get(&self, i: usize) -> SequenceRecord {
        assert!(i < self.len(), "record {i} out of range");
        let rb = self.manifest.record_bytes();
        let start = self.data_offset + i * rb;
        let mut words = self.mmap[start..start + rb]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()));
        let true_length = words.next().unwrap() as usize;
        SequenceRecord {
            token_ids: words.collect(),
            true_length,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_corpus(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("corpus.txt");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn single_short_line() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_corpus(dir.path(), "a b c\n");
        let store = build_store(&corpus, dir.path(), "c", 64, 8).unwrap();
        assert_eq!(store.len(), 1);
        let r = store.get(0);
        assert_eq!(r.true_length, 5);
        assert_eq!(r.token_ids[0], CLS);
        assert_eq!(r.token_ids[4], SEP);
        assert_eq!(&r.token_ids[5..], &[PAD; 3]);
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_corpus(dir.path(), "the cat sat\n\non the mat .\nthe end\n");
        build_store(&corpus, dir.path(), "a", 64, 6).unwrap();
        build_store(&corpus, dir.path(), "b", 64, 6).unwrap();
        let a = fs::read(dir.path().join("a.records")).unwrap();
        let b = fs::read(dir.path().join("b.records")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn long_lines_are_split_not_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_corpus(dir.path(), "w1 w2 w3 w4 w5 w6 w7\n");
        let store = build_store(&corpus, dir.path(), "c", 64, 5).unwrap();
        // 3 body tokens per record -> 3 + 3 + 1
        assert_eq!(store.len(), 3);
        assert_eq!(store.get(2).true_length, 3);
    }

    #[test]
    fn empty_corpus_and_tiny_vocab_fail() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_corpus(dir.path(), "\n   \n");
        assert!(matches!(
            build_store(&corpus, dir.path(), "c", 64, 8),
            Err(DataError::EmptyCorpus(_))
        ));
        let corpus = write_corpus(dir.path(), "a b\n");
        assert!(matches!(
            build_store(&corpus, dir.path(), "c", 3, 8),
            Err(DataError::VocabTooSmall { .. })
        ));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_corpus(dir.path(), "a b c\nd e\n");
        build_store(&corpus, dir.path(), "c", 64, 8).unwrap();
        let path = dir.path().join("c.records");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(RecordStore::open(&path), Err(DataError::Malformed(_))));
    }

    #[test]
    fn prefix_paths_resolve_both_files() {
        let p = StorePaths::from_prefix(Path::new("/tmp/x/corpus.records"));
        assert_eq!(p, StorePaths::new(Path::new("/tmp/x"), "corpus"));
        let p = StorePaths::from_prefix(Path::new("/tmp/x/corpus"));
        assert_eq!(p.vocab, PathBuf::from("/tmp/x/corpus.vocab"));
    }
}
