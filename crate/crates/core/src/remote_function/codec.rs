//! Argument and result codecs.
//!
//! Integers and floats travel as fixed-width little-endian images; floats as
//! their IEEE-754 bit pattern. Byte arrays and strings carry a `u64` length
//! prefix. Fixed arrays are the concatenation of their elements.
//!
//! There are two ways to reach the same bytes: the static [`Migratable`]
//! trait for Rust types, and the dynamic [`CodecKind`]/[`Value`] pair used
//! where types are only known at run time (the C interface, schema checks).

use std::fmt;

use thiserror::Error;

use crate::runtime::RemoteBufferHandle;
use crate::transport::NodeId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("unexpected end of input: need {needed} bytes, {available} left")]
    UnexpectedEnd { needed: u64, available: usize },
    #[error("invalid UTF-8 in string argument")]
    InvalidUtf8,
    #[error("{0} trailing bytes after the last value")]
    TrailingBytes(usize),
    #[error("expected a value of kind {expected}, got {found}")]
    KindMismatch { expected: CodecKind, found: String },
}

/// Description of how one parameter or result is encoded.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum CodecKind {
    Unit,
    I8,
    I16,
    I32,
    I64,
    U8,
    U16,
    U32,
    U64,
    F32,
    F64,
    Bytes,
    Str,
    Buffer,
    Array(Box<CodecKind>, usize),
}

impl fmt::Display for CodecKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodecKind::Unit => f.write_str("unit"),
            CodecKind::I8 => f.write_str("i8"),
            CodecKind::I16 => f.write_str("i16"),
            CodecKind::I32 => f.write_str("i32"),
            CodecKind::I64 => f.write_str("i64"),
            CodecKind::U8 => f.write_str("u8"),
            CodecKind::U16 => f.write_str("u16"),
            CodecKind::U32 => f.write_str("u32"),
            CodecKind::U64 => f.write_str("u64"),
            CodecKind::F32 => f.write_str("f32"),
            CodecKind::F64 => f.write_str("f64"),
            CodecKind::Bytes => f.write_str("bytes"),
            CodecKind::Str => f.write_str("str"),
            CodecKind::Buffer => f.write_str("buffer"),
            CodecKind::Array(inner, n) => write!(f, "[{inner}; {n}]"),
        }
    }
}

/// A dynamically typed argument or result.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Unit,
    I8(i8),
    I16(i16),
    I32(i32),
    I64(i64),
    U8(u8),
    U16(u16),
    U32(u32),
    U64(u64),
    F32(f32),
    F64(f64),
    Bytes(Vec<u8>),
    Str(String),
    Buffer(RemoteBufferHandle),
    Array(Vec<Value>),
}

impl Value {
    fn kind_name(&self) -> String {
        match self {
            Value::Unit => "unit".into(),
            Value::I8(_) => "i8".into(),
            Value::I16(_) => "i16".into(),
            Value::I32(_) => "i32".into(),
            Value::I64(_) => "i64".into(),
            Value::U8(_) => "u8".into(),
            Value::U16(_) => "u16".into(),
            Value::U32(_) => "u32".into(),
            Value::U64(_) => "u64".into(),
            Value::F32(_) => "f32".into(),
            Value::F64(_) => "f64".into(),
            Value::Bytes(_) => "bytes".into(),
            Value::Str(_) => "str".into(),
            Value::Buffer(_) => "buffer".into(),
            Value::Array(items) => format!("array of {}", items.len()),
        }
    }
}

pub(crate) fn take<'a>(input: &mut &'a [u8], n: usize) -> Result<&'a [u8], CodecError> {
    if input.len() < n {
        return Err(CodecError::UnexpectedEnd {
            needed: n as u64,
            available: input.len(),
        });
    }
    let (head, rest) = input.split_at(n);
    *input = rest;
    Ok(head)
}

fn take_array<const N: usize>(input: &mut &[u8]) -> Result<[u8; N], CodecError> {
    Ok(take(input, N)?.try_into().expect("length checked"))
}

fn take_len_prefixed<'a>(input: &mut &'a [u8]) -> Result<&'a [u8], CodecError> {
    let len = u64::from_le_bytes(take_array(input)?);
    if len > input.len() as u64 {
        return Err(CodecError::UnexpectedEnd {
            needed: len,
            available: input.len(),
        });
    }
    take(input, len as usize)
}

fn put_len_prefixed(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

impl CodecKind {
    /// Fixed-width kinds whose byte image is valid in any process.
    pub fn transport_safe(&self) -> bool {
        match self {
            CodecKind::Bytes | CodecKind::Str => false,
            CodecKind::Array(inner, _) => inner.transport_safe(),
            _ => true,
        }
    }

    /// Encoded size, if it does not depend on the value.
    pub fn fixed_size(&self) -> Option<usize> {
        Some(match self {
            CodecKind::Unit => 0,
            CodecKind::I8 | CodecKind::U8 => 1,
            CodecKind::I16 | CodecKind::U16 => 2,
            CodecKind::I32 | CodecKind::U32 | CodecKind::F32 => 4,
            CodecKind::I64 | CodecKind::U64 | CodecKind::F64 => 8,
            CodecKind::Buffer => RemoteBufferHandle::ENCODED_LEN,
            CodecKind::Bytes | CodecKind::Str => return None,
            CodecKind::Array(inner, n) => inner.fixed_size()? * n,
        })
    }

    pub fn encode(&self, value: &Value, out: &mut Vec<u8>) -> Result<(), CodecError> {
        let mismatch = || CodecError::KindMismatch {
            expected: self.clone(),
            found: value.kind_name(),
        };
        match (self, value) {
            (CodecKind::Unit, Value::Unit) => {}
            (CodecKind::I8, Value::I8(v)) => out.extend_from_slice(&v.to_le_bytes()),
            (CodecKind::I16, Value::I16(v)) => out.extend_from_slice(&v.to_le_bytes()),
            (CodecKind::I32, Value::I32(v)) => out.extend_from_slice(&v.to_le_bytes()),
            (CodecKind::I64, Value::I64(v)) => out.extend_from_slice(&v.to_le_bytes()),
            (CodecKind::U8, Value::U8(v)) => out.extend_from_slice(&v.to_le_bytes()),
            (CodecKind::U16, Value::U16(v)) => out.extend_from_slice(&v.to_le_bytes()),
            (CodecKind::U32, Value::U32(v)) => out.extend_from_slice(&v.to_le_bytes()),
            (CodecKind::U64, Value::U64(v)) => out.extend_from_slice(&v.to_le_bytes()),
            (CodecKind::F32, Value::F32(v)) => out.extend_from_slice(&v.to_bits().to_le_bytes()),
            (CodecKind::F64, Value::F64(v)) => out.extend_from_slice(&v.to_bits().to_le_bytes()),
            (CodecKind::Bytes, Value::Bytes(v)) => put_len_prefixed(out, v),
            (CodecKind::Str, Value::Str(v)) => put_len_prefixed(out, v.as_bytes()),
            (CodecKind::Buffer, Value::Buffer(h)) => h.encode(out),
            (CodecKind::Array(inner, n), Value::Array(items)) => {
                if items.len() != *n {
                    return Err(mismatch());
                }
                for item in items {
                    inner.encode(item, out)?;
                }
            }
            _ => return Err(mismatch()),
        }
        Ok(())
    }

    pub fn decode(&self, input: &mut &[u8]) -> Result<Value, CodecError> {
        Ok(match self {
            CodecKind::Unit => Value::Unit,
            CodecKind::I8 => Value::I8(i8::from_le_bytes(take_array(input)?)),
            CodecKind::I16 => Value::I16(i16::from_le_bytes(take_array(input)?)),
            CodecKind::I32 => Value::I32(i32::from_le_bytes(take_array(input)?)),
            CodecKind::I64 => Value::I64(i64::from_le_bytes(take_array(input)?)),
            CodecKind::U8 => Value::U8(u8::from_le_bytes(take_array(input)?)),
            CodecKind::U16 => Value::U16(u16::from_le_bytes(take_array(input)?)),
            CodecKind::U32 => Value::U32(u32::from_le_bytes(take_array(input)?)),
            CodecKind::U64 => Value::U64(u64::from_le_bytes(take_array(input)?)),
            CodecKind::F32 => Value::F32(f32::from_bits(u32::from_le_bytes(take_array(input)?))),
            CodecKind::F64 => Value::F64(f64::from_bits(u64::from_le_bytes(take_array(input)?))),
            CodecKind::Bytes => Value::Bytes(take_len_prefixed(input)?.to_vec()),
            CodecKind::Str => Value::Str(
                std::str::from_utf8(take_len_prefixed(input)?)
                    .map_err(|_| CodecError::InvalidUtf8)?
                    .to_owned(),
            ),
            CodecKind::Buffer => Value::Buffer(RemoteBufferHandle::decode(input)?),
            CodecKind::Array(inner, n) => {
                Value::Array((0..*n).map(|_| inner.decode(input)).collect::<Result<_, _>>()?)
            }
        })
    }
}

/// Encodes `values` against `kinds` in order.
pub fn encode_values(kinds: &[CodecKind], values: &[Value]) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::new();
    for (kind, value) in kinds.iter().zip(values) {
        kind.encode(value, &mut out)?;
    }
    Ok(out)
}

/// Decodes exactly `kinds.len()` values and rejects leftovers.
pub fn decode_values(kinds: &[CodecKind], mut input: &[u8]) -> Result<Vec<Value>, CodecError> {
    let values = kinds
        .iter()
        .map(|k| k.decode(&mut input))
        .collect::<Result<Vec<_>, _>>()?;
    if !input.is_empty() {
        return Err(CodecError::TrailingBytes(input.len()));
    }
    Ok(values)
}

/// Serialization hook for values that cross address spaces.
///
/// Types without an implementation cannot be used as remote arguments or
/// results; the compiler rejects them:
///
/// ```compile_fail
/// use ham::Migratable;
/// fn needs_migratable<T: Migratable>(_: T) {}
/// needs_migratable(&0u8 as *const u8);
/// ```
pub trait Migratable: Sized + Send + 'static {
    /// True if the encoding is a plain fixed-width copy.
    const TRANSPORT_SAFE: bool;

    fn kind() -> CodecKind;

    fn encode(&self, out: &mut Vec<u8>);

    fn decode(input: &mut &[u8]) -> Result<Self, CodecError>;

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode(&mut out);
        out
    }

    /// Decodes a value that must span all of `bytes`.
    fn from_bytes(mut bytes: &[u8]) -> Result<Self, CodecError> {
        let v = Self::decode(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(CodecError::TrailingBytes(bytes.len()));
        }
        Ok(v)
    }
}

macro_rules! le_scalar {
    ($($t:ty => $kind:ident),* $(,)?) => {$(
        impl Migratable for $t {
            const TRANSPORT_SAFE: bool = true;

            fn kind() -> CodecKind {
                CodecKind::$kind
            }

            fn encode(&self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn decode(input: &mut &[u8]) -> Result<Self, CodecError> {
                Ok(<$t>::from_le_bytes(take_array(input)?))
            }
        }
    )*};
}

le_scalar!(i8 => I8, i16 => I16, i32 => I32, i64 => I64, u8 => U8, u16 => U16, u32 => U32, u64 => U64);

impl Migratable for f32 {
    const TRANSPORT_SAFE: bool = true;

    fn kind() -> CodecKind {
        CodecKind::F32
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_bits().to_le_bytes());
    }

    fn decode(input: &mut &[u8]) -> Result<Self, CodecError> {
        Ok(f32::from_bits(u32::from_le_bytes(take_array(input)?)))
    }
}

impl Migratable for f64 {
    const TRANSPORT_SAFE: bool = true;

    fn kind() -> CodecKind {
        CodecKind::F64
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_bits().to_le_bytes());
    }

    fn decode(input: &mut &[u8]) -> Result<Self, CodecError> {
        Ok(f64::from_bits(u64::from_le_bytes(take_array(input)?)))
    }
}

impl Migratable for () {
    const TRANSPORT_SAFE: bool = true;

    fn kind() -> CodecKind {
        CodecKind::Unit
    }

    fn encode(&self, _: &mut Vec<u8>) {}

    fn decode(_: &mut &[u8]) -> Result<Self, CodecError> {
        Ok(())
    }
}

impl Migratable for Vec<u8> {
    const TRANSPORT_SAFE: bool = false;

    fn kind() -> CodecKind {
        CodecKind::Bytes
    }

    fn encode(&self, out: &mut Vec<u8>) {
        put_len_prefixed(out, self);
    }

    fn decode(input: &mut &[u8]) -> Result<Self, CodecError> {
        Ok(take_len_prefixed(input)?.to_vec())
    }
}

impl Migratable for String {
    const TRANSPORT_SAFE: bool = false;

    fn kind() -> CodecKind {
        CodecKind::Str
    }

    fn encode(&self, out: &mut Vec<u8>) {
        put_len_prefixed(out, self.as_bytes());
    }

    fn decode(input: &mut &[u8]) -> Result<Self, CodecError> {
        std::str::from_utf8(take_len_prefixed(input)?)
            .map(str::to_owned)
            .map_err(|_| CodecError::InvalidUtf8)
    }
}

impl<T: Migratable, const N: usize> Migratable for [T; N] {
    const TRANSPORT_SAFE: bool = T::TRANSPORT_SAFE;

    fn kind() -> CodecKind {
        CodecKind::Array(Box::new(T::kind()), N)
    }

    fn encode(&self, out: &mut Vec<u8>) {
        for item in self {
            item.encode(out);
        }
    }

    fn decode(input: &mut &[u8]) -> Result<Self, CodecError> {
        let items = (0..N)
            .map(|_| T::decode(input))
            .collect::<Result<Vec<T>, _>>()?;
        Ok(items
            .try_into()
            .unwrap_or_else(|_| unreachable!("exactly N items decoded")))
    }
}

impl Migratable for RemoteBufferHandle {
    const TRANSPORT_SAFE: bool = true;

    fn kind() -> CodecKind {
        CodecKind::Buffer
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.node.0.to_le_bytes());
        out.extend_from_slice(&self.token.to_le_bytes());
        out.extend_from_slice(&self.count.to_le_bytes());
        out.extend_from_slice(&self.elem_size.to_le_bytes());
    }

    fn decode(input: &mut &[u8]) -> Result<Self, CodecError> {
        let mut next = || -> Result<u64, CodecError> { Ok(u64::from_le_bytes(take_array(input)?)) };
        Ok(RemoteBufferHandle {
            node: NodeId(next()?),
            token: next()?,
            count: next()?,
            elem_size: next()?,
        })
    }
}

/// A typed parameter list: `()`, `(A,)`, `(A, B)`, … up to six parameters.
pub trait ArgList: Sized + Send + 'static {
    fn kinds() -> Vec<CodecKind>;

    fn encode_all(&self, out: &mut Vec<u8>);

    /// Decodes every parameter; trailing bytes are an error.
    fn decode_all(input: &[u8]) -> Result<Self, CodecError>;
}

macro_rules! arg_list {
    ($($name:ident),*) => {
        impl<$($name: Migratable),*> ArgList for ($($name,)*) {
            fn kinds() -> Vec<CodecKind> {
                vec![$($name::kind()),*]
            }

            #[allow(non_snake_case, unused_variables)]
            fn encode_all(&self, out: &mut Vec<u8>) {
                let ($($name,)*) = self;
                $($name.encode(out);)*
            }

            #[allow(unused_mut)]
            fn decode_all(mut input: &[u8]) -> Result<Self, CodecError> {
                let v = ($($name::decode(&mut input)?,)*);
                if !input.is_empty() {
                    return Err(CodecError::TrailingBytes(input.len()));
                }
                Ok(v)
            }
        }
    };
}

arg_list!();
arg_list!(A1);
arg_list!(A1, A2);
arg_list!(A1, A2, A3);
arg_list!(A1, A2, A3, A4);
arg_list!(A1, A2, A3, A4, A5);
arg_list!(A1, A2, A3, A4, A5, A6);

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layouts() {
        assert_eq!(7i64.to_bytes(), [7, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!((-1i16).to_bytes(), [0xff, 0xff]);
        assert_eq!(1.0f64.to_bytes(), 0x3ff0_0000_0000_0000u64.to_le_bytes());
        assert_eq!(
            b"ab".to_vec().to_bytes(),
            [2, 0, 0, 0, 0, 0, 0, 0, b'a', b'b']
        );
        assert_eq!([1u8, 2, 3].to_bytes(), [1, 2, 3]);
        assert!(().to_bytes().is_empty());
    }

    #[test]
    fn transport_safety() {
        assert!(<i32 as Migratable>::TRANSPORT_SAFE);
        assert!(<[f64; 4] as Migratable>::TRANSPORT_SAFE);
        assert!(<RemoteBufferHandle as Migratable>::TRANSPORT_SAFE);
        assert!(!<Vec<u8> as Migratable>::TRANSPORT_SAFE);
        assert!(!<String as Migratable>::TRANSPORT_SAFE);
        assert!(!<[String; 2] as Migratable>::TRANSPORT_SAFE);
        assert_eq!(<[String; 2]>::kind().transport_safe(), false);
        assert_eq!(<[u16; 2]>::kind().fixed_size(), Some(4));
        assert_eq!(CodecKind::Bytes.fixed_size(), None);
    }

    #[test]
    fn truncated_and_trailing_rejected() {
        assert!(matches!(
            i64::from_bytes(&[1, 2, 3]),
            Err(CodecError::UnexpectedEnd { .. })
        ));
        assert_eq!(u8::from_bytes(&[1, 2]), Err(CodecError::TrailingBytes(1)));
        // Length prefix larger than the remaining input.
        let mut lying = 1000u64.to_le_bytes().to_vec();
        lying.push(0);
        assert!(Vec::<u8>::from_bytes(&lying).is_err());
        let mut bad_utf8 = 1u64.to_le_bytes().to_vec();
        bad_utf8.push(0xff);
        assert_eq!(String::from_bytes(&bad_utf8), Err(CodecError::InvalidUtf8));
    }

    #[test]
    fn arg_list_exactness() {
        let mut bytes = Vec::new();
        (7i64, 2.5f32).encode_all(&mut bytes);
        assert_eq!(<(i64, f32)>::decode_all(&bytes), Ok((7, 2.5)));
        bytes.extend_from_slice(&[0, 0, 0]);
        assert_eq!(
            <(i64, f32)>::decode_all(&bytes),
            Err(CodecError::TrailingBytes(3))
        );
        assert_eq!(<()>::decode_all(&[]), Ok(()));
        assert_eq!(<(i64, f32)>::kinds(), vec![CodecKind::I64, CodecKind::F32]);
    }

    #[test]
    fn dynamic_kind_mismatch() {
        let mut out = Vec::new();
        assert!(matches!(
            CodecKind::I64.encode(&Value::F64(1.0), &mut out),
            Err(CodecError::KindMismatch { .. })
        ));
        assert!(CodecKind::Array(Box::new(CodecKind::U8), 2)
            .encode(&Value::Array(vec![Value::U8(1)]), &mut out)
            .is_err());
    }

    fn handle() -> impl Strategy<Value = RemoteBufferHandle> {
        (any::<u64>(), any::<u64>(), any::<u64>(), any::<u64>()).prop_map(|(n, t, c, e)| {
            RemoteBufferHandle {
                node: NodeId(n),
                token: t,
                count: c,
                elem_size: e,
            }
        })
    }

    // Round trip through the static codec, plus agreement with the dynamic
    // codec on the exact same bytes.
    fn check<T: Migratable + fmt::Debug>(v: T, eq: impl Fn(&T, &T) -> bool) -> Result<(), TestCaseError> {
        let bytes = v.to_bytes();
        let back = T::from_bytes(&bytes).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(eq(&v, &back), "{:?} != {:?}", v, back);
        let dynamic = decode_values(&[T::kind()], &bytes).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let reencoded = encode_values(&[T::kind()], &dynamic).unwrap();
        prop_assert_eq!(reencoded, bytes);
        if T::TRANSPORT_SAFE {
            prop_assert_eq!(Some(v.to_bytes().len()), T::kind().fixed_size());
        }
        Ok(())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn ints_round_trip(a: i8, b: i16, c: i32, d: i64, e: u8, f: u16, g: u32, h: u64) {
            check(a, PartialEq::eq)?;
            check(b, PartialEq::eq)?;
            check(c, PartialEq::eq)?;
            check(d, PartialEq::eq)?;
            check(e, PartialEq::eq)?;
            check(f, PartialEq::eq)?;
            check(g, PartialEq::eq)?;
            check(h, PartialEq::eq)?;
        }

        #[test]
        fn floats_round_trip_bitwise(a in any::<u32>(), b in any::<u64>()) {
            // Arbitrary bit patterns, NaN payloads included.
            check(f32::from_bits(a), |x, y| x.to_bits() == y.to_bits())?;
            check(f64::from_bits(b), |x, y| x.to_bits() == y.to_bits())?;
        }

        #[test]
        fn variable_length_round_trip(bytes in prop::collection::vec(any::<u8>(), 0..256), s in ".{0,64}") {
            check(bytes, PartialEq::eq)?;
            check(s, PartialEq::eq)?;
        }

        #[test]
        fn arrays_and_handles_round_trip(a: [i32; 5], b: [u8; 16], h in handle()) {
            check(a, PartialEq::eq)?;
            check(b, PartialEq::eq)?;
            check(h, PartialEq::eq)?;
            check([h, h], PartialEq::eq)?;
        }
    }
}
