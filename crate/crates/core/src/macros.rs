//! Helper for closed string-valued enums used in configuration files.

/// Declares a fieldless enum whose serde, `Display` and `FromStr` forms are
/// the given upper-case names. Parsing ignores case and accepts `-` for `_`.
macro_rules! closed_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl std::str::FromStr for $name {
            type Err = $crate::Error;
            fn from_str(s: &str) -> $crate::Result<Self> {
                let norm = s.replace('-', "_");
                $(if norm.eq_ignore_ascii_case($text) {
                    return Ok($name::$variant);
                })+
                Err($crate::Error::Config(format!(concat!("unknown ", stringify!($name), " {:?}"), s)))
            }
        }
    };
}

