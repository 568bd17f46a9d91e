//! Fixed token layout shared by the generator, the model and the CLI.

/// Largest supported grid side.
pub const MAX_GRID: usize = 8;
/// Distinct values of the latent cell attribute ("color").
pub const NUM_COLORS: usize = 4;
/// Width of the attribute block inside a patch feature vector.
pub const ATTR_DIM: usize = 8;
/// Raw patch feature width: attribute block, row one-hot, column one-hot.
pub const PATCH_FEATURES: usize = ATTR_DIM + 2 * MAX_GRID;

/// Token ids. The layout is static; `Vocab` only groups the helpers.
pub struct Vocab;

impl Vocab {
    pub const EOS: u32 = 0;
    pub const PAD: u32 = 1;
    pub const REGION: u32 = 2;
    pub const LOOKUP: u32 = 3;
    pub const COMPARE: u32 = 4;
    pub const COUNT: u32 = 5;
    const ROW0: u32 = 6;
    const COL0: u32 = Self::ROW0 + MAX_GRID as u32;
    const COLOR0: u32 = Self::COL0 + MAX_GRID as u32;
    pub const YES: u32 = Self::COLOR0 + NUM_COLORS as u32;
    pub const NO: u32 = Self::YES + 1;
    const NUM0: u32 = Self::NO + 1;
    /// Counts `0..=MAX_GRID`.
    pub const SIZE: usize = Self::NUM0 as usize + MAX_GRID + 1;

    pub fn row(r: usize) -> u32 {
        assert!(r < MAX_GRID);
        Self::ROW0 + r as u32
    }

    pub fn col(c: usize) -> u32 {
        assert!(c < MAX_GRID);
        Self::COL0 + c as u32
    }

    pub fn color(i: usize) -> u32 {
        assert!(i < NUM_COLORS);
        Self::COLOR0 + i as u32
    }

    pub fn num(n: usize) -> u32 {
        assert!(n <= MAX_GRID);
        Self::NUM0 + n as u32
    }

    pub fn colors() -> Vec<u32> {
        (0..NUM_COLORS).map(Self::color).collect()
    }

    pub fn nums() -> Vec<u32> {
        (0..=MAX_GRID).map(Self::num).collect()
    }

    pub fn color_index(id: u32) -> Option<usize> {
        (Self::COLOR0..Self::YES)
            .contains(&id)
            .then(|| (id - Self::COLOR0) as usize)
    }

    /// Surface form, e.g. `<row3>`.
    pub fn name(id: u32) -> Option<String> {
        let s = match id {
            Self::EOS => "<eos>".to_string(),
            Self::PAD => "<pad>".to_string(),
            Self::REGION => "<region>".to_string(),
            Self::LOOKUP => "<lookup>".to_string(),
            Self::COMPARE => "<compare>".to_string(),
            Self::COUNT => "<count>".to_string(),
            Self::YES => "<yes>".to_string(),
            Self::NO => "<no>".to_string(),
            i if (Self::ROW0..Self::COL0).contains(&i) => format!("<row{}>", i - Self::ROW0),
            i if (Self::COL0..Self::COLOR0).contains(&i) => format!("<col{}>", i - Self::COL0),
            i if (Self::COLOR0..Self::YES).contains(&i) => format!("<color{}>", i - Self::COLOR0),
            i if (Self::NUM0..Self::SIZE as u32).contains(&i) => format!("<num{}>", i - Self::NUM0),
            _ => return None,
        };
        Some(s)
    }

    pub fn lookup(name: &str) -> Option<u32> {
        (0..Self::SIZE as u32).find(|&id| Self::name(id).as_deref() == Some(name))
    }

    /// Parses whitespace-separated token names.
    pub fn encode(text: &str) -> Option<Vec<u32>> {
        text.split_whitespace().map(Self::lookup).collect()
    }
}
