//! Fixed synthetic name pools for entity generation.
//!
//! Pools are ASCII-only and apostrophe-free so the tokenizer's possessive rule
//! never fires inside a name. A sizeable share of the surname pool is at least
//! ten characters long, which makes the tokenizer's sub-split rule fire and
//! yields multi-token single components.

pub const FIRST: &[&str] = &[
    "Mara", "Silas", "Tove", "Orin", "Vesna", "Daro", "Ilka", "Bram", "Nyssa", "Corin", "Alba",
    "Fenwick", "Ingo", "Petra", "Rafe", "Sanna", "Teodor", "Una", "Viggo", "Wren", "Yuri",
    "Zelda", "Anouk", "Bodhi", "Cleo", "Dmitri", "Edda", "Fenn", "Greta", "Hollis", "Idris",
    "Jonas", "Kaia", "Lazlo", "Mirek", "Nadia", "Oskar", "Pim", "Quinn", "Ronja", "Stellan",
    "Tilde", "Ulric", "Vera", "Wilmer", "Xenia", "Yara", "Zora",
];

pub const MIDDLE: &[&str] = &[
    "De", "La", "Van", "Mae", "Rey", "Lou", "Jun", "Ash", "Bea", "Cyr", "Dov", "Eli", "Fay",
    "Gus", "Ivo", "Jay", "Kit", "Lee", "Moe", "Ned", "Oz", "Pax", "Rue", "Sol",
];

pub const LAST: &[&str] = &[
    "Venn", "Hale", "Marsh", "Quillenbach", "Vandermere", "Schermerhorn", "Ostrowski",
    "Fairweather", "Blackwood", "Greenhalgh", "Montgomerie", "Aldercroft", "Winterbourne",
    "Thistlewood", "Ravenscroft", "Pemberton", "Ashdown", "Birchall", "Cavendish", "Delacroix",
    "Everhart", "Farrow", "Gatlin", "Hargrove", "Ibsen", "Jessop", "Kincaid", "Loxley",
    "Mercer", "Norwood", "Ogilvie", "Prendergast", "Quimby", "Rutherford", "Silverstone",
    "Trelawney", "Underhill", "Voss", "Whitfield", "Yorke", "Zimmermann", "Abernathy",
    "Bickerstaff", "Crowhurst", "Dunmore", "Ellsworth", "Featherston", "Honeycutt",
];
