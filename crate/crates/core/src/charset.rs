use crate::error::{Error, Result};

/// Symbols of the default desk-scale character set: ten letters plus one digit.
pub const DESK_SYMBOLS: &str = "ABCDEHKLPT7";

/// Ordered recognition classes. Index `len(symbols)` is the `[PAD]` class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Charset {
    symbols: Vec<char>,
}

impl Charset {
    pub fn new(symbols: &str) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        if symbols.is_empty() {
            return Err(Error::Config("character set is empty".into()));
        }
        for (i, c) in symbols.iter().enumerate() {
            if symbols[..i].contains(c) {
                return Err(Error::Config(format!("symbol {c:?} appears twice")));
            }
        }
        Ok(Self { symbols })
    }

    pub fn desk() -> Self {
        Self::new(DESK_SYMBOLS).expect("desk charset is valid")
    }

    /// Number of classes C, including `[PAD]`.
    pub fn num_classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn pad_index(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn as_string(&self) -> String {
        self.symbols.iter().collect()
    }

    pub fn index_of(&self, c: char) -> Result<usize> {
        self.symbols
            .iter()
            .position(|&s| s == c)
            .ok_or(Error::UnknownSymbol(c))
    }

    /// Class indices of `text`, padded with `[PAD]` to exactly `slots` entries.
    pub fn encode_padded(&self, text: &str, slots: usize) -> Result<Vec<usize>> {
        let mut out = text
            .chars()
            .map(|c| self.index_of(c))
            .collect::<Result<Vec<_>>>()?;
        if out.len() > slots {
            return Err(Error::TextTooLong {
                text: text.to_string(),
                max: slots,
            });
        }
        out.resize(slots, self.pad_index());
        Ok(out)
    }

    /// Reads symbols up to (not including) the first `[PAD]`.
    pub fn decode(&self, indices: &[usize]) -> String {
        indices
            .iter()
            .take_while(|&&i| i != self.pad_index())
            .filter_map(|&i| self.symbols.get(i))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_charset_has_twelve_classes() {
        let cs = Charset::desk();
        assert_eq!(cs.num_classes(), 12);
        assert_eq!(cs.pad_index(), 11);
    }

    #[test]
    fn encode_pads_and_decode_stops_at_pad() {
        let cs = Charset::desk();
        let enc = cs.encode_padded("AB", 4).unwrap();
        assert_eq!(enc, vec![0, 1, 11, 11]);
        assert_eq!(cs.decode(&enc), "AB");
        assert_eq!(cs.decode(&[0, 11, 1]), "A");
        assert!(matches!(
            cs.encode_padded("ABCDE", 4),
            Err(Error::TextTooLong { .. })
        ));
        assert!(matches!(
            cs.encode_padded("Z", 4),
            Err(Error::UnknownSymbol('Z'))
        ));
    }

    #[test]
    fn rejects_duplicates() {
        assert!(Charset::new("AA").is_err());
        assert!(Charset::new("").is_err());
    }
}
