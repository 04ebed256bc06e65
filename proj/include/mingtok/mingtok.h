#ifndef MINGTOK_MINGTOK_H
#define MINGTOK_MINGTOK_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define MT_API __declspec(dllexport)
#elif defined(__GNUC__)
#define MT_API __attribute__((visibility("default")))
#else
#define MT_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes. They double as process exit codes for the command line. */
typedef enum mt_status {
  MT_OK = 0,
  MT_ERR_VALIDATION = 1, /* bad arguments, configs, shapes or missing files */
  MT_ERR_NUMERIC = 2,    /* non-finite values */
  MT_ERR_CHECK = 3       /* a verification (gradient check) failed */
} mt_status;

typedef struct mt_tokenizer mt_tokenizer;
typedef struct mt_unified mt_unified;
typedef struct mt_session mt_session;

typedef enum mt_architecture {
  MT_ARCH_UNIFIED = 1,  /* one representation per image */
  MT_ARCH_SEPARATE = 2, /* separate understanding and generation tokenizers */
  MT_ARCH_HYBRID = 3    /* hybrid AR-diffusion */
} mt_architecture;

typedef struct mt_counters {
  uint64_t encode_calls;
  uint64_t decode_calls;
  uint64_t expand_calls;
} mt_counters;

/* Message for the last failing call on this thread ("" if none). */
MT_API const char* mt_last_error(void);
/* Frees strings returned through char** out-parameters. */
MT_API void mt_string_free(char* s);
MT_API const char* mt_version(void);

/* ---- configs and accounting ---- */

/* Resolved preset as JSON: config, token counts and parameter counts. */
MT_API int mt_inspect_preset(const char* preset, char** json_out);
MT_API int mt_visual_token_count(int architecture, size_t images, size_t tokens_per_image, size_t* out);
/* 1 - count(architecture) / count(baseline); images and tokens must be > 0. */
MT_API int mt_token_reduction(int architecture, int baseline, size_t images, size_t tokens_per_image,
                              double* out);

/* ---- tokenizer ---- */

/* config is a preset name or a JSON tokenizer config. */
MT_API int mt_tokenizer_create(const char* config, uint64_t seed, mt_tokenizer** out);
MT_API int mt_tokenizer_load(const char* path, mt_tokenizer** out);
MT_API int mt_tokenizer_save(const mt_tokenizer* tok, const char* path);
MT_API void mt_tokenizer_free(mt_tokenizer* tok);
MT_API int mt_tokenizer_config(const mt_tokenizer* tok, char** json_out);
/* Sizes: resolution, tokens, latent_dim, semantic_dim. Any pointer may be NULL. */
MT_API int mt_tokenizer_dims(const mt_tokenizer* tok, size_t* resolution, size_t* tokens, size_t* latent_dim,
                             size_t* semantic_dim);
/* pixels: resolution*resolution*3 floats in [0,1], row-major HWC.
   latents: tokens*latent_dim floats. semantics: tokens*semantic_dim floats. */
MT_API int mt_tokenizer_encode(const mt_tokenizer* tok, const float* pixels, float* latents);
MT_API int mt_tokenizer_expand(const mt_tokenizer* tok, const float* latents, float* semantics);
MT_API int mt_tokenizer_decode(const mt_tokenizer* tok, const float* semantics, float* pixels);
MT_API int mt_tokenizer_reconstruct(const mt_tokenizer* tok, const float* pixels, float* out_pixels);
MT_API int mt_tokenizer_counters(const mt_tokenizer* tok, mt_counters* out);

/* Reconstructs one image file (.png or .mtok) and writes out_path (.png or
   .mtok by extension). metrics_json receives {"psnr","ssim"} computed on the
   float tensors; pass NULL to skip. */
MT_API int mt_reconstruct_file(const mt_tokenizer* tok, const char* in_path, const char* out_path,
                               char** metrics_json);
MT_API int mt_image_metrics(const char* a_path, const char* b_path, double* psnr, double* ssim);

/* ---- training ---- */

/* config_json: training config text. Relative paths resolve against base_dir
   (may be NULL). Writes the checkpoint (container + .json sidecar) and, if
   metrics_path is not NULL, one JSON line per step. */
MT_API int mt_train_tokenizer(const char* config_json, const char* base_dir, const char* checkpoint_out,
                              const char* metrics_path);
MT_API int mt_train_unified(const char* config_json, const char* base_dir, const char* checkpoint_out,
                            const char* metrics_path);

/* ---- unified model ---- */

/* Loads the unified checkpoint and the tokenizer checkpoint it names. */
MT_API int mt_unified_load(const char* path, mt_unified** out);
MT_API void mt_unified_free(mt_unified* model);
/* Generates one image for the prompt and writes out_path (.png or .mtok by
   extension). steps == 0 uses the checkpoint default. info_json (optional)
   receives counts and a latent checksum. */
MT_API int mt_generate(const mt_unified* model, const char* prompt, size_t steps, uint64_t seed,
                       const char* out_path, char** info_json);

/* ---- sessions ---- */

MT_API int mt_session_create(const mt_unified* model, mt_session** out);
MT_API void mt_session_free(mt_session* session);
MT_API int mt_session_add_text(mt_session* session, const char* text);
MT_API int mt_session_add_image(mt_session* session, const float* pixels, size_t* image_index);
MT_API int mt_session_generate(mt_session* session, const char* instruction, size_t steps, uint64_t seed,
                               size_t* image_index);
/* pixels: resolution*resolution*3 floats. */
MT_API int mt_session_render(mt_session* session, size_t image_index, float* pixels);
MT_API int mt_session_counters(const mt_session* session, mt_counters* out);
MT_API int mt_session_context_length(const mt_session* session, size_t* out);
/* Runs a JSON-lines script file; transcript lines go to transcript_path and
   rendered images to out_dir. */
MT_API int mt_session_run_script(const mt_unified* model, const char* script_path, const char* out_dir,
                                 const char* transcript_path);

/* ---- diagnostics ---- */

/* Finite-difference suite over every op and the end-to-end losses. Returns
   MT_ERR_CHECK if any case fails; report_json (optional) lists every case. */
MT_API int mt_gradcheck(int include_f32, char** report_json);
/* Debug hook: negates the backward rule of the named op ("" clears). */
MT_API int mt_debug_set_backward_fault(const char* op);

#ifdef __cplusplus
}
#endif

#endif
