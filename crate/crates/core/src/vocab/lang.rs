//! Language registry: FLEURS language codes with English display names and
//! the language family used for grouped reporting.

use crate::error::{Error, Result};

/// (code, display name, language group)
pub const FLEURS_LANGUAGES: &[(&str, &str, &str)] = &[
    ("af_za", "Afrikaans", "Indo-European"),
    ("am_et", "Amharic", "Afro-Asiatic"),
    ("ar_eg", "Arabic", "Afro-Asiatic"),
    ("as_in", "Assamese", "Indo-European"),
    ("ast_es", "Asturian", "Indo-European"),
    ("az_az", "Azerbaijani", "Turkic"),
    ("be_by", "Belarusian", "Indo-European"),
    ("bg_bg", "Bulgarian", "Indo-European"),
    ("bn_in", "Bengali", "Indo-European"),
    ("bs_ba", "Bosnian", "Indo-European"),
    ("ca_es", "Catalan", "Indo-European"),
    ("ceb_ph", "Cebuano", "Austronesian"),
    ("ckb_iq", "Sorani Kurdish", "Indo-European"),
    ("cmn_hans_cn", "Mandarin Chinese", "Sino-Tibetan"),
    ("cs_cz", "Czech", "Indo-European"),
    ("cy_gb", "Welsh", "Indo-European"),
    ("da_dk", "Danish", "Indo-European"),
    ("de_de", "German", "Indo-European"),
    ("el_gr", "Greek", "Indo-European"),
    ("en_us", "English", "Indo-European"),
    ("es_419", "Spanish", "Indo-European"),
    ("et_ee", "Estonian", "Uralic"),
    ("fa_ir", "Persian", "Indo-European"),
    ("ff_sn", "Fula", "Atlantic-Congo"),
    ("fi_fi", "Finnish", "Uralic"),
    ("fil_ph", "Filipino", "Austronesian"),
    ("fr_fr", "French", "Indo-European"),
    ("ga_ie", "Irish", "Indo-European"),
    ("gl_es", "Galician", "Indo-European"),
    ("gu_in", "Gujarati", "Indo-European"),
    ("ha_ng", "Hausa", "Afro-Asiatic"),
    ("he_il", "Hebrew", "Afro-Asiatic"),
    ("hi_in", "Hindi", "Indo-European"),
    ("hr_hr", "Croatian", "Indo-European"),
    ("hu_hu", "Hungarian", "Uralic"),
    ("hy_am", "Armenian", "Indo-European"),
    ("id_id", "Indonesian", "Austronesian"),
    ("ig_ng", "Igbo", "Atlantic-Congo"),
    ("is_is", "Icelandic", "Indo-European"),
    ("it_it", "Italian", "Indo-European"),
    ("ja_jp", "Japanese", "Japonic"),
    ("jv_id", "Javanese", "Austronesian"),
    ("ka_ge", "Georgian", "Kartvelian"),
    ("kam_ke", "Kamba", "Atlantic-Congo"),
    ("kea_cv", "Kabuverdianu", "Indo-European"),
    ("kk_kz", "Kazakh", "Turkic"),
    ("km_kh", "Khmer", "Austro-Asiatic"),
    ("kn_in", "Kannada", "Dravidian"),
    ("ko_kr", "Korean", "Koreanic"),
    ("ky_kg", "Kyrgyz", "Turkic"),
    ("lb_lu", "Luxembourgish", "Indo-European"),
    ("lg_ug", "Ganda", "Atlantic-Congo"),
    ("ln_cd", "Lingala", "Atlantic-Congo"),
    ("lo_la", "Lao", "Kra-Dai"),
    ("lt_lt", "Lithuanian", "Indo-European"),
    ("luo_ke", "Luo", "Nilo-Saharan"),
    ("lv_lv", "Latvian", "Indo-European"),
    ("mi_nz", "Maori", "Austronesian"),
    ("mk_mk", "Macedonian", "Indo-European"),
    ("ml_in", "Malayalam", "Dravidian"),
    ("mn_mn", "Mongolian", "Mongolic"),
    ("mr_in", "Marathi", "Indo-European"),
    ("ms_my", "Malay", "Austronesian"),
    ("mt_mt", "Maltese", "Afro-Asiatic"),
    ("my_mm", "Burmese", "Sino-Tibetan"),
    ("nb_no", "Norwegian", "Indo-European"),
    ("ne_np", "Nepali", "Indo-European"),
    ("nl_nl", "Dutch", "Indo-European"),
    ("nso_za", "Northern Sotho", "Atlantic-Congo"),
    ("ny_mw", "Nyanja", "Atlantic-Congo"),
    ("oc_fr", "Occitan", "Indo-European"),
    ("om_et", "Oromo", "Afro-Asiatic"),
    ("or_in", "Oriya", "Indo-European"),
    ("pa_in", "Punjabi", "Indo-European"),
    ("pl_pl", "Polish", "Indo-European"),
    ("ps_af", "Pashto", "Indo-European"),
    ("pt_br", "Portuguese", "Indo-European"),
    ("ro_ro", "Romanian", "Indo-European"),
    ("ru_ru", "Russian", "Indo-European"),
    ("sd_in", "Sindhi", "Indo-European"),
    ("sk_sk", "Slovak", "Indo-European"),
    ("sl_si", "Slovenian", "Indo-European"),
    ("sn_zw", "Shona", "Atlantic-Congo"),
    ("so_so", "Somali", "Afro-Asiatic"),
    ("sr_rs", "Serbian", "Indo-European"),
    ("sv_se", "Swedish", "Indo-European"),
    ("sw_ke", "Swahili", "Atlantic-Congo"),
    ("ta_in", "Tamil", "Dravidian"),
    ("te_in", "Telugu", "Dravidian"),
    ("tg_tj", "Tajik", "Indo-European"),
    ("th_th", "Thai", "Kra-Dai"),
    ("tr_tr", "Turkish", "Turkic"),
    ("uk_ua", "Ukrainian", "Indo-European"),
    ("umb_ao", "Umbundu", "Atlantic-Congo"),
    ("ur_pk", "Urdu", "Indo-European"),
    ("uz_uz", "Uzbek", "Turkic"),
    ("vi_vn", "Vietnamese", "Austro-Asiatic"),
    ("wo_sn", "Wolof", "Atlantic-Congo"),
    ("xh_za", "Xhosa", "Atlantic-Congo"),
    ("yo_ng", "Yoruba", "Atlantic-Congo"),
    ("yue_hant_hk", "Cantonese Chinese", "Sino-Tibetan"),
    ("zu_za", "Zulu", "Atlantic-Congo"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Language {
    pub code: &'static str,
    pub name: &'static str,
    pub group: &'static str,
}

/// Look up a language by full code (`fr_fr`) or by its leading segment
/// (`fr`) when that segment is unambiguous.
pub fn lookup(code: &str) -> Result<Language> {
    let make = |&(code, name, group): &(&'static str, &'static str, &'static str)| Language {
        code,
        name,
        group,
    };
    if let Some(entry) = FLEURS_LANGUAGES.iter().find(|e| e.0 == code) {
        return Ok(make(entry));
    }
    let mut matches = FLEURS_LANGUAGES
        .iter()
        .filter(|e| e.0.split('_').next() == Some(code));
    match (matches.next(), matches.next()) {
        (Some(entry), None) => Ok(make(entry)),
        _ => Err(Error::UnknownLanguage(code.to_string())),
    }
}
