//! Canonical binary encoding.
//!
//! Every hashed or signed structure goes through this module. Integers are
//! fixed-width big-endian, variable-length data is prefixed with a `u32`
//! big-endian length, structs encode their fields in declaration order and
//! maps/sets encode entries in ascending key order. Decoding is strict: any
//! byte string that decodes re-encodes to exactly the same bytes.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::hash::{sha256, Digest};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unexpected end of input at byte {0}")]
    Eof(usize),
    #[error("invalid tag {tag} for {what} at byte {at}")]
    BadTag {
        what: &'static str,
        tag: u8,
        at: usize,
    },
    #[error("invalid utf-8 string at byte {0}")]
    Utf8(usize),
    #[error("non-canonical ordering in {0}")]
    Order(&'static str),
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("invalid value: {0}")]
    Invalid(String),
}

#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn put_i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn put_bool(&mut self, v: bool) {
        self.put_u8(v as u8);
    }

    pub fn put_fixed(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn put_bytes(&mut self, bytes: &[u8]) {
        let len = u32::try_from(bytes.len()).expect("field longer than u32::MAX");
        self.put_u32(len);
        self.buf.extend_from_slice(bytes);
    }

    pub fn put_str(&mut self, s: &str) {
        self.put_bytes(s.as_bytes());
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn finish(&self) -> Result<(), DecodeError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(DecodeError::Trailing(n)),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(DecodeError::Eof(self.pos));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn get_u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn get_u32(&mut self) -> Result<u32, DecodeError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes(b.try_into().unwrap()))
    }

    pub fn get_u64(&mut self) -> Result<u64, DecodeError> {
        let b = self.take(8)?;
        Ok(u64::from_be_bytes(b.try_into().unwrap()))
    }

    pub fn get_i64(&mut self) -> Result<i64, DecodeError> {
        let b = self.take(8)?;
        Ok(i64::from_be_bytes(b.try_into().unwrap()))
    }

    pub fn get_bool(&mut self) -> Result<bool, DecodeError> {
        let at = self.pos;
        match self.get_u8()? {
            0 => Ok(false),
            1 => Ok(true),
            tag => Err(DecodeError::BadTag {
                what: "bool",
                tag,
                at,
            }),
        }
    }

    pub fn get_fixed<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    pub fn get_bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let len = self.get_u32()? as usize;
        self.take(len)
    }

    pub fn get_str(&mut self) -> Result<String, DecodeError> {
        let at = self.pos;
        let b = self.get_bytes()?;
        String::from_utf8(b.to_vec()).map_err(|_| DecodeError::Utf8(at))
    }

    /// Reads a `u32` element count, refusing counts that cannot possibly fit
    /// in the remaining input (each element takes at least one byte).
    pub fn get_count(&mut self) -> Result<usize, DecodeError> {
        let n = self.get_u32()? as usize;
        if n > self.remaining() {
            return Err(DecodeError::Eof(self.pos));
        }
        Ok(n)
    }
}

/// A type with one canonical byte representation.
pub trait Canonical: Sized {
    fn encode(&self, enc: &mut Encoder);
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError>;

    fn to_canonical_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.into_bytes()
    }

    fn from_canonical_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(bytes);
        let v = Self::decode(&mut dec)?;
        dec.finish()?;
        Ok(v)
    }

    fn canonical_digest(&self) -> Digest {
        sha256(&self.to_canonical_bytes())
    }
}

impl Canonical for u8 {
    fn encode(&self, enc: &mut Encoder) {
        enc.put_u8(*self)
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        dec.get_u8()
    }
}

impl Canonical for u64 {
    fn encode(&self, enc: &mut Encoder) {
        enc.put_u64(*self)
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        dec.get_u64()
    }
}

impl Canonical for i64 {
    fn encode(&self, enc: &mut Encoder) {
        enc.put_i64(*self)
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        dec.get_i64()
    }
}

impl Canonical for bool {
    fn encode(&self, enc: &mut Encoder) {
        enc.put_bool(*self)
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        dec.get_bool()
    }
}

impl Canonical for String {
    fn encode(&self, enc: &mut Encoder) {
        enc.put_str(self)
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        dec.get_str()
    }
}

impl Canonical for Digest {
    fn encode(&self, enc: &mut Encoder) {
        enc.put_fixed(&self.0)
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Digest(dec.get_fixed()?))
    }
}

impl<T: Canonical> Canonical for Option<T> {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            None => enc.put_u8(0),
            Some(v) => {
                enc.put_u8(1);
                v.encode(enc);
            }
        }
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let at = dec.position();
        match dec.get_u8()? {
            0 => Ok(None),
            1 => Ok(Some(T::decode(dec)?)),
            tag => Err(DecodeError::BadTag {
                what: "option",
                tag,
                at,
            }),
        }
    }
}

impl<T: Canonical> Canonical for Vec<T> {
    fn encode(&self, enc: &mut Encoder) {
        enc.put_u32(u32::try_from(self.len()).expect("list longer than u32::MAX"));
        for item in self {
            item.encode(enc);
        }
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let n = dec.get_count()?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(T::decode(dec)?);
        }
        Ok(out)
    }
}

impl<A: Canonical, B: Canonical> Canonical for (A, B) {
    fn encode(&self, enc: &mut Encoder) {
        self.0.encode(enc);
        self.1.encode(enc);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok((A::decode(dec)?, B::decode(dec)?))
    }
}

impl<K: Canonical + Ord, V: Canonical> Canonical for BTreeMap<K, V> {
    fn encode(&self, enc: &mut Encoder) {
        enc.put_u32(u32::try_from(self.len()).expect("map larger than u32::MAX"));
        for (k, v) in self {
            k.encode(enc);
            v.encode(enc);
        }
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let n = dec.get_count()?;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let k = K::decode(dec)?;
            let v = V::decode(dec)?;
            if out.last_key_value().is_some_and(|(last, _)| *last >= k) {
                return Err(DecodeError::Order("map"));
            }
            out.insert(k, v);
        }
        Ok(out)
    }
}

impl<T: Canonical + Ord> Canonical for BTreeSet<T> {
    fn encode(&self, enc: &mut Encoder) {
        enc.put_u32(u32::try_from(self.len()).expect("set larger than u32::MAX"));
        for v in self {
            v.encode(enc);
        }
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let n = dec.get_count()?;
        let mut out = BTreeSet::new();
        for _ in 0..n {
            let v = T::decode(dec)?;
            if out.last().is_some_and(|last| *last >= v) {
                return Err(DecodeError::Order("set"));
            }
            out.insert(v);
        }
        Ok(out)
    }
}

/// Implements [`Canonical`] for a struct by encoding the listed fields in order.
#[macro_export]
macro_rules! canonical_struct {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl $crate::codec::Canonical for $ty {
            fn encode(&self, enc: &mut $crate::codec::Encoder) {
                $( $crate::codec::Canonical::encode(&self.$field, enc); )*
            }
            fn decode(
                dec: &mut $crate::codec::Decoder<'_>,
            ) -> Result<Self, $crate::codec::DecodeError> {
                Ok($ty { $( $field: $crate::codec::Canonical::decode(dec)?, )* })
            }
        }
    };
}

/// Implements [`Canonical`] for a fieldless enum as a single tag byte.
#[macro_export]
macro_rules! canonical_enum {
    ($ty:ident { $($variant:ident = $tag:literal),* $(,)? }) => {
        impl $crate::codec::Canonical for $ty {
            fn encode(&self, enc: &mut $crate::codec::Encoder) {
                let tag: u8 = match self { $( $ty::$variant => $tag, )* };
                enc.put_u8(tag);
            }
            fn decode(
                dec: &mut $crate::codec::Decoder<'_>,
            ) -> Result<Self, $crate::codec::DecodeError> {
                let at = dec.position();
                match dec.get_u8()? {
                    $( $tag => Ok($ty::$variant), )*
                    tag => Err($crate::codec::DecodeError::BadTag {
                        what: stringify!($ty),
                        tag,
                        at,
                    }),
                }
            }
        }
    };
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn integers_are_big_endian_and_strings_length_prefixed() {
        let mut e = Encoder::new();
        e.put_u64(1);
        e.put_str("ab");
        assert_eq!(
            e.into_bytes(),
            vec![0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 2, b'a', b'b']
        );
    }

    #[test]
    fn strict_decoding_rejects_noncanonical_forms() {
        assert!(matches!(
            bool::from_canonical_bytes(&[2]),
            Err(DecodeError::BadTag { .. })
        ));
        assert!(matches!(
            u64::from_canonical_bytes(&[0; 9]),
            Err(DecodeError::Trailing(1))
        ));
        // map with keys out of order
        let mut e = Encoder::new();
        e.put_u32(2);
        e.put_u64(5);
        e.put_u64(0);
        e.put_u64(3);
        e.put_u64(0);
        let bytes = e.into_bytes();
        assert_eq!(
            BTreeMap::<u64, u64>::from_canonical_bytes(&bytes),
            Err(DecodeError::Order("map"))
        );
    }

    #[test]
    fn huge_counts_do_not_allocate() {
        let bytes = [0xff, 0xff, 0xff, 0xff];
        assert!(Vec::<u64>::from_canonical_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn map_round_trip(m in proptest::collection::btree_map(any::<u64>(), ".{0,8}", 0..16)) {
            let bytes = m.to_canonical_bytes();
            prop_assert_eq!(BTreeMap::<u64, String>::from_canonical_bytes(&bytes).unwrap(), m);
        }

        #[test]
        fn decoded_values_reencode_identically(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            if let Ok(v) = Vec::<(Option<String>, i64)>::from_canonical_bytes(&bytes) {
                prop_assert_eq!(v.to_canonical_bytes(), bytes);
            }
        }
    }
}
