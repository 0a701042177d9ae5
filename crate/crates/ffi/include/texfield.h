#ifndef TEXFIELD_H
#define TEXFIELD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum TexfieldStatus {
  TEXFIELD_STATUS_OK = 0,
  TEXFIELD_STATUS_NULL_POINTER = 1,
  TEXFIELD_STATUS_INVALID_ARGUMENT = 2,
  TEXFIELD_STATUS_IO = 3,
  TEXFIELD_STATUS_PARSE = 4,
  TEXFIELD_STATUS_CHECKPOINT = 5,
  TEXFIELD_STATUS_GEOMETRY = 6,
  TEXFIELD_STATUS_SHAPE = 7,
  TEXFIELD_STATUS_IMAGE = 8,
  TEXFIELD_STATUS_PANIC = 9,
} TexfieldStatus;

// Per-voxel latent codes.
typedef struct TexfieldLatent TexfieldLatent;

// A curated mesh ready for sampling and baking.
typedef struct TexfieldMesh TexfieldMesh;

// A trained VAE (single precision).
typedef struct TexfieldVae TexfieldVae;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread (empty after a success).
// The pointer stays valid until the next call on the same thread.
const char *texfield_last_error(void);

// Library version as a static NUL-terminated string.
const char *texfield_version(void);

enum TexfieldStatus texfield_vae_load(const char *path, struct TexfieldVae **out);

void texfield_vae_free(struct TexfieldVae *vae);

// Loads and curates a mesh (OBJ or PLY with UVs for baking).
enum TexfieldStatus texfield_mesh_load(const char *path, struct TexfieldMesh **out);

void texfield_mesh_free(struct TexfieldMesh *mesh);

// Face count of a curated mesh, or 0 for a null handle.
size_t texfield_mesh_face_count(const struct TexfieldMesh *mesh);

// Samples `count` surface points and encodes them into a latent at `resolution`.
enum TexfieldStatus texfield_encode(const struct TexfieldVae *vae,
                                    const struct TexfieldMesh *mesh,
                                    size_t count,
                                    uint32_t resolution,
                                    uint64_t seed,
                                    bool monochrome,
                                    struct TexfieldLatent **out);

enum TexfieldStatus texfield_latent_load(const char *path, struct TexfieldLatent **out);

enum TexfieldStatus texfield_latent_save(const struct TexfieldLatent *latent, const char *path);

void texfield_latent_free(struct TexfieldLatent *latent);

// Number of active voxels, or 0 for a null handle.
size_t texfield_latent_voxel_count(const struct TexfieldLatent *latent);

// Latent channels per voxel, or 0 for a null handle.
size_t texfield_latent_dim(const struct TexfieldLatent *latent);

// Queries the color field at `count` points (`xyz` holds `3 * count` doubles).
// Writes `3 * count` RGB values to `rgb` and one flag per point to `valid`
// (0 where the point lies outside every active voxel, whose color is left at 0).
enum TexfieldStatus texfield_query_colors(const struct TexfieldVae *vae,
                                          const struct TexfieldLatent *latent,
                                          const double *xyz,
                                          size_t count,
                                          double *rgb,
                                          uint8_t *valid);

// Bakes the latent's color field into a `width x height` RGBA PNG using the mesh's UVs.
enum TexfieldStatus texfield_bake_png(const struct TexfieldVae *vae,
                                      const struct TexfieldLatent *latent,
                                      const struct TexfieldMesh *mesh,
                                      size_t width,
                                      size_t height,
                                      size_t supersamples,
                                      uint64_t seed,
                                      bool v_flip,
                                      const char *path);

// Point-space PSNR of the latent's colors against the mesh's true colors at
// `count` held-out surface samples.
enum TexfieldStatus texfield_heldout_psnr(const struct TexfieldVae *vae,
                                          const struct TexfieldLatent *latent,
                                          const struct TexfieldMesh *mesh,
                                          size_t count,
                                          uint64_t seed,
                                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TEXFIELD_H */
